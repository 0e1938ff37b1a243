"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import TensorND, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int
    boundary_coords: int  # coords where both gradients vanish (clamped regions)


@dataclass
class GradCheckReport:
    params: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params.values()), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol

    def summary(self) -> str:
        lines = [f"{n}: max_rel_err={p.max_rel_err:.3e} checked={p.n_checked}"
                 + (f" boundary={p.boundary_coords}" if p.boundary_coords else "")
                 for n, p in sorted(self.params.items())]
        return "\n".join(lines)


def check_gradients(f: Callable[[], TensorND],
                    params: Mapping[str, TensorND],
                    h: float = 1e-5,
                    max_coords_per_param: int | None = None,
                    seed: int = 0,
                    zero_floor: float = 1e-10) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``f`` must be deterministic given its captured state and must rebuild its
    graph on every call (parameters are perturbed in place between calls).
    Large parameter tensors can be subsampled via ``max_coords_per_param``
    (the subset is seeded, so the report is reproducible). Coordinates where
    both the analytic and numeric gradient vanish are counted as boundary
    cases (clamped / inactive regions) rather than compared.
    """
    loss = f()
    grads = backward(loss)
    analytic = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        boundary = 0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                up = f().item()
            flat[c] = orig - h
            with no_grad():
                down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[c])
            if abs(a) < zero_floor and abs(numeric) < zero_floor:
                boundary += 1
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), zero_floor)
            worst = max(worst, rel)
        report.params[name] = ParamCheck(name, worst, len(coords), boundary)
    return report
