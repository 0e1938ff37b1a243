"""Dense arrays with reverse-mode gradient accumulation.

A ``TensorND`` wraps a contiguous float64 (or opt-in float32) numpy array.
Differentiable operations build an implicit graph; ``backward`` walks it once
in reverse topological order via a single-use ``GradTape``. Every forward
result is checked for finiteness: NaN/Inf is a contract violation, not a
value, and raises ``NumericError`` naming the offending op.

Tensors and the tape they build are confined to one thread; independent
graphs over disjoint data may run in parallel.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "TensorND",
    "GradTape",
    "NumericError",
    "DimensionError",
    "ContractError",
    "backward",
    "tensor",
    "concat",
    "take_along_axis",
    "broadcast_to",
    "quantile",
    "no_grad",
    "grad_enabled",
]


class NumericError(ArithmeticError):
    """A forward op produced a non-finite value (or was fed one)."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(RuntimeError):
    """An op precondition was violated (non-scalar loss, consumed tape, ...)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output of op '{op}'")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class TensorND:
    """Dense numeric array; the value carrier for activations and parameters."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _vjp: Callable | None = None, _op: str = "leaf"):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        elif dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        _check_finite(self.data, _op)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op
        self._needs_grad = self.requires_grad or any(p._needs_grad for p in _parents)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a scalar, got shape {self.shape}")

    def __repr__(self) -> str:
        return f"TensorND(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "TensorND":
        return TensorND(self.data, dtype=self.data.dtype)

    # -- graph construction -----------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple, vjp, op: str) -> "TensorND":
        if _GRAD_ENABLED and any(p._needs_grad for p in parents):
            return TensorND(data, dtype=data.dtype, _parents=parents, _vjp=vjp, _op=op)
        return TensorND(data, dtype=data.dtype, _op=op)

    @staticmethod
    def _lift(x) -> "TensorND":
        return x if isinstance(x, TensorND) else TensorND(x)

    def _lift_like(self, x) -> "TensorND":
        """Lift a scalar/array to a tensor matching this tensor's dtype."""
        if isinstance(x, TensorND):
            return x
        return TensorND(np.asarray(x, dtype=self.dtype))

    # -- elementwise binary -----------------------------------------------

    def __add__(self, other):
        other = self._lift_like(other)
        a, b = self, other
        out = a.data + b.data
        return self._result(out, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                            "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift_like(other)
        a, b = self, other
        out = a.data - b.data
        return self._result(out, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                            "sub")

    def __rsub__(self, other):
        return self._lift_like(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift_like(other)
        a, b = self, other
        out = a.data * b.data
        return self._result(out, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)),
                            "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift_like(other)
        a, b = self, other
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
        return self._result(out, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
                            "div")

    def __rtruediv__(self, other):
        return self._lift_like(other).__truediv__(self)

    def __neg__(self):
        a = self
        return self._result(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        a, p = self, float(exponent)
        out = a.data ** p
        return self._result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
        out = np.matmul(a.data, b.data)

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._result(out, (a, b), vjp, "matmul")

    # -- elementwise unary ------------------------------------------------

    def exp(self):
        a = self
        with np.errstate(over="ignore"):
            out = np.exp(a.data)
        return self._result(out, (a,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        with np.errstate(divide="raise", invalid="raise"):
            try:
                out = np.log(a.data)
            except FloatingPointError as exc:
                raise NumericError("non-finite output of op 'log'") from exc
        return self._result(out, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        a = self
        with np.errstate(invalid="ignore"):
            out = np.sqrt(a.data)
        return self._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return self._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self):
        a = self
        out = np.maximum(a.data, 0.0)
        return self._result(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")

    def clamp_min(self, minval: float):
        a = self
        out = np.maximum(a.data, minval)
        return self._result(out, (a,), lambda g: (g * (a.data > minval),), "clamp_min")

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._result(np.asarray(out), (a,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.mean(axis=axis, keepdims=keepdims)
        denom = a.data.size if axis is None else np.prod(
            [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

        def vjp(g):
            g = np.asarray(g) / denom
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._result(np.asarray(out), (a,), vjp, "mean")

    def max(self, axis: int = -1, keepdims: bool = False):
        """Row/axis maximum; ties route the gradient to the first index."""
        a = self
        if a.data.shape[axis] == 0:
            raise DimensionError("max over an empty axis")
        out = a.data.max(axis=axis, keepdims=keepdims)
        idx = np.argmax(a.data, axis=axis)

        def vjp(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.zeros_like(a.data)
            np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
            return (grad,)

        return self._result(np.asarray(out), (a,), vjp, "max")

    def min_with_index(self, axis: int = -1):
        """Minimum along ``axis`` plus the (first) argmin indices.

        The index array is detached; the gradient flows only to the selected
        entries, so ties are resolved deterministically toward index 0.
        """
        a = self
        if a.data.shape[axis] == 0:
            raise DimensionError("min over an empty axis")
        idx = np.argmin(a.data, axis=axis)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def vjp(g):
            grad = np.zeros_like(a.data)
            np.put_along_axis(grad, np.expand_dims(idx, axis),
                              np.expand_dims(np.asarray(g), axis), axis=axis)
            return (grad,)

        return self._result(np.asarray(out), (a,), vjp, "min_with_index"), idx

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = a.data.reshape(shape)
        return self._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, axes: Sequence[int]):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = a.data.transpose(axes)
        return self._result(out, (a,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, ax1: int, ax2: int):
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> TensorND:
    return TensorND(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors: Sequence[TensorND], axis: int = 0) -> TensorND:
    ts = [TensorND._lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return TensorND._result(out, tuple(ts), vjp, "concat")


def take_along_axis(t: TensorND, indices: np.ndarray, axis: int) -> TensorND:
    """Gather entries by index; the gradient scatters back additively."""
    a = TensorND._lift(t)
    idx = np.asarray(indices)
    ax = axis % a.ndim
    out = np.take_along_axis(a.data, idx, axis=ax)

    def vjp(g):
        grad = np.zeros_like(a.data)
        mesh = list(np.ix_(*[np.arange(n) for n in idx.shape]))
        mesh[ax] = idx
        np.add.at(grad, tuple(mesh), g)
        return (grad,)

    return TensorND._result(out, (a,), vjp, "take_along_axis")


def broadcast_to(t: TensorND, shape: Sequence[int]) -> TensorND:
    a = TensorND._lift(t)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return TensorND._result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def quantile(t: TensorND, q: float) -> TensorND:
    """Linear-interpolation quantile over all entries. Not differentiable."""
    if not 0.0 < q < 1.0:
        raise ContractError(f"quantile needs q in (0,1), got {q}")
    a = TensorND._lift(t)
    if a.size == 0:
        raise DimensionError("quantile of an empty tensor")
    out = np.quantile(a.data.reshape(-1), q, method="linear")
    return TensorND(np.asarray(out), dtype=a.dtype, _op="quantile")


class GradTape:
    """Ordered record of the differentiable ops reachable from one root.

    Built by a reverse-topological trace; ``run`` replays it backward exactly
    once and then consumes it (node closures are dropped so the graph cannot
    be replayed).
    """

    def __init__(self, nodes: list[TensorND], root: TensorND):
        self._nodes = nodes
        self._root = root
        self.consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    @classmethod
    def trace(cls, root: TensorND) -> "GradTape":
        order: list[TensorND] = []
        seen: set[int] = set()
        stack: list[tuple[TensorND, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order, root)

    def run(self) -> dict[TensorND, np.ndarray]:
        if self.consumed:
            raise ContractError("tape already consumed; rebuild the graph to backpropagate again")
        if len(self._nodes) <= 1 and not self._root._parents:
            raise ContractError("tape is empty: the loss has no recorded operations")
        grads: dict[int, np.ndarray] = {id(self._root): np.ones_like(self._root.data)}
        leaf_grads: dict[TensorND, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaf_grads[node] = node.grad
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p._needs_grad:
                    continue  # never materialize grads for requires_grad=False leaves
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for node in self._nodes:
            node._vjp = None
            node._parents = ()
        self.consumed = True
        return leaf_grads


def backward(loss: TensorND) -> dict[TensorND, np.ndarray]:
    """Accumulate dLoss/dLeaf for every requires_grad leaf below ``loss``.

    The loss must be scalar; the graph is consumed by the call.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    return GradTape.trace(loss).run()
