"""Linear attention with stabilized positive random features.

The feature map estimates the softmax kernel: with ``W`` entries of variance
``1/sqrt(d_h)``, the corrected positive features satisfy
``E[phi(q) . phi(k)] = exp(q.k / sqrt(d_h))``, so attention built from them
is a Monte-Carlo estimate of temperature-scaled softmax attention whose
per-draw variance decays like ``1/m``. Stabilization shifts are placed where
they cancel in the numerator/denominator ratio: per-row for queries, one
global constant for keys.

``exact_attention`` is the quadratic-cost softmax reference used as the
correctness oracle and the latency comparator.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, TensorND, tensor


@dataclass(frozen=True)
class FeatureMap:
    """A fixed random-feature projection for one attention head.

    ``W`` has shape (d_h, m) with entries drawn from N(0, sigma2) where
    sigma2 = 1/sqrt(d_h) carries the softmax temperature (sigma2 = 1 for the
    unscaled variant). The matrix never changes after construction; use
    ``redraw`` to obtain a new map from an explicit seed.
    """

    W: np.ndarray
    m: int
    seed: int
    sigma2: float

    @classmethod
    def draw(cls, d_h: int, m: int, seed: int, temperature_scaled: bool = True) -> "FeatureMap":
        if m < 1:
            raise ValueError(f"feature count must be >= 1, got {m}")
        sigma2 = 1.0 / np.sqrt(d_h) if temperature_scaled else 1.0
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, np.sqrt(sigma2), size=(d_h, m))
        return cls(W=W, m=m, seed=seed, sigma2=sigma2)

    def redraw(self, seed: int) -> "FeatureMap":
        return FeatureMap.draw(self.W.shape[0], self.m, seed,
                               temperature_scaled=self.sigma2 != 1.0)


@dataclass
class AttentionConfig:
    heads: int
    features: int
    eps_a: float = 1e-6
    bidirectional: bool = True  # no causal mask, ever

    def __post_init__(self):
        if self.eps_a <= 0:
            raise ValueError(f"eps_a must be positive, got {self.eps_a}")
        if not self.bidirectional:
            raise ValueError("causal masking is not supported")


# Allocation accounting for the complexity contract: linear attention may
# allocate feature matrices (linear in L) and summaries (independent of L),
# but never anything quadratic in sequence length.
_LEDGER_STACK: list[dict] = []


@contextlib.contextmanager
def allocation_ledger():
    entries: dict[str, list[int]] = {"features": [], "summary": []}
    _LEDGER_STACK.append(entries)
    try:
        yield entries
    finally:
        _LEDGER_STACK.pop()


def _account(kind: str, size: int) -> None:
    if _LEDGER_STACK:
        _LEDGER_STACK[-1][kind].append(int(size))


def stabilized_features(X, fm: FeatureMap) -> TensorND:
    """Phi(X) = exp(XW - rowmax(XW)) / sqrt(m), rows of X along axis -2.

    Every entry lies in (0, 1/sqrt(m)] and each row attains 1/sqrt(m) at its
    rowmax position. Accepts stacked leading dimensions.
    """
    X = X if isinstance(X, TensorND) else tensor(X)
    U = X @ tensor(fm.W)
    U = U - U.max(axis=-1, keepdims=True)
    out = U.exp() * (1.0 / np.sqrt(fm.m))
    _account("features", out.size)
    return out


def _key_features(X, fm: FeatureMap) -> TensorND:
    """Key-side positive features with the norm correction.

    exp(XW - sigma2*||x||^2/2 - C)/sqrt(m) with C the global max of the
    exponent: C is one constant per attention call, so it cancels exactly in
    the attention ratio while keeping every entry in (0, 1/sqrt(m)].
    """
    X = X if isinstance(X, TensorND) else tensor(X)
    U = X @ tensor(fm.W) - (X * X).sum(axis=-1, keepdims=True) * (0.5 * fm.sigma2)
    shift = U.max(axis=-1, keepdims=True).max(axis=-2, keepdims=True)
    out = (U - shift).exp() * (1.0 / np.sqrt(fm.m))
    _account("features", out.size)
    return out


def linear_attention(Q, K, V, fm_q: FeatureMap, fm_k: FeatureMap,
                     eps_a: float = 1e-6) -> TensorND:
    """(Phi(Q)(Phi_k(K)^T V)) / (Phi(Q)(Phi_k(K)^T 1) + eps_a).

    Cost O(L * m * d); no L x L intermediate is ever materialized. Leading
    batch/head dimensions broadcast. The denominator is >= eps_a by feature
    positivity.
    """
    Q = Q if isinstance(Q, TensorND) else tensor(Q)
    K = K if isinstance(K, TensorND) else tensor(K)
    V = V if isinstance(V, TensorND) else tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"key/value row counts disagree: {K.shape} vs {V.shape}")
    pq = stabilized_features(Q, fm_q)
    pk = _key_features(K, fm_k)
    summary = pk.swapaxes(-1, -2) @ V                       # (m, d_v)
    normalizer = pk.sum(axis=-2, keepdims=True).swapaxes(-1, -2)  # (m, 1)
    _account("summary", summary.size)
    _account("summary", normalizer.size)
    return (pq @ summary) / (pq @ normalizer + eps_a)


def exact_attention(Q, K, V, scale_logits: bool = True) -> TensorND:
    """softmax(QK^T / sqrt(d_h)) V with rowmax-stabilized softmax."""
    Q = Q if isinstance(Q, TensorND) else tensor(Q)
    K = K if isinstance(K, TensorND) else tensor(K)
    V = V if isinstance(V, TensorND) else tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"key/value row counts disagree: {K.shape} vs {V.shape}")
    logits = Q @ K.swapaxes(-1, -2)
    if scale_logits:
        logits = logits * (1.0 / np.sqrt(Q.shape[-1]))
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = logits.exp()
    w = w / w.sum(axis=-1, keepdims=True)
    return w @ V


# ---------------------------------------------------------------------------
# Transformer block: linear self-attention, cross-attention to context, each
# followed by a feedforward; pre-norm residuals throughout.
# ---------------------------------------------------------------------------


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_layer_norm(params: dict, prefix: str, d: int) -> None:
    params[f"{prefix}.g"] = tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}.b"] = tensor(np.zeros(d), requires_grad=True)


def layer_norm(x: TensorND, params: dict, prefix: str, eps: float = 1e-6) -> TensorND:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def init_attention_params(params: dict, prefix: str, d: int,
                          rng: np.random.Generator) -> None:
    # output projection zero-initialized: the residual block starts as identity
    for name in ("wq", "wk", "wv"):
        params[f"{prefix}.{name}"] = tensor(_kaiming_uniform(rng, d, (d, d)), requires_grad=True)
    params[f"{prefix}.wo"] = tensor(np.zeros((d, d)), requires_grad=True)
    init_layer_norm(params, f"{prefix}.ln", d)


def init_feedforward_params(params: dict, prefix: str, d: int, hidden: int,
                            rng: np.random.Generator) -> None:
    params[f"{prefix}.w1"] = tensor(_kaiming_uniform(rng, d, (d, hidden)), requires_grad=True)
    params[f"{prefix}.b1"] = tensor(np.zeros(hidden), requires_grad=True)
    params[f"{prefix}.w2"] = tensor(np.zeros((hidden, d)), requires_grad=True)
    params[f"{prefix}.b2"] = tensor(np.zeros(d), requires_grad=True)
    init_layer_norm(params, f"{prefix}.ln", d)


def feedforward(x: TensorND, params: dict, prefix: str) -> TensorND:
    h = layer_norm(x, params, f"{prefix}.ln")
    h = (h @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]).relu()
    return x + (h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"])


def _split_heads(x: TensorND, heads: int) -> TensorND:
    *lead, T, d = x.shape
    return x.reshape(*lead, T, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: TensorND) -> TensorND:
    x = x.swapaxes(-2, -3)
    *lead, T, H, dh = x.shape
    return x.reshape(*lead, T, H * dh)


def multihead_linear_attention(xq: TensorND, xkv: TensorND, params: dict, prefix: str,
                               fms: list[FeatureMap], cfg: AttentionConfig) -> TensorND:
    """Pre-norm multi-head linear attention sublayer with residual."""
    H = cfg.heads
    q_in = layer_norm(xq, params, f"{prefix}.ln")
    kv_in = q_in if xkv is xq else xkv
    q = _split_heads(q_in @ params[f"{prefix}.wq"], H)
    k = _split_heads(kv_in @ params[f"{prefix}.wk"], H)
    v = _split_heads(kv_in @ params[f"{prefix}.wv"], H)
    outs = [linear_attention(q_h, k_h, v_h, fms[h], fms[h], cfg.eps_a)
            for h, (q_h, k_h, v_h) in enumerate(_iter_heads(q, k, v, H))]
    stacked = _stack_heads(outs)
    return xq + _merge_heads(stacked) @ params[f"{prefix}.wo"]


def _iter_heads(q, k, v, H):
    for h in range(H):
        yield _take_head(q, h), _take_head(k, h), _take_head(v, h)


def _take_head(x: TensorND, h: int) -> TensorND:
    # x: (..., H, T, dh) -> (..., T, dh) for head h via gather
    from .numerics import take_along_axis

    idx_shape = list(x.shape)
    idx_shape[-3] = 1
    idx = np.full(idx_shape, h, dtype=np.int64)
    out = take_along_axis(x, idx, axis=-3)
    *lead, _, T, dh = out.shape
    return out.reshape(*lead, T, dh)


def _stack_heads(outs: list[TensorND]) -> TensorND:
    from .numerics import concat

    *lead, T, dh = outs[0].shape
    expanded = [o.reshape(*lead, 1, T, dh) for o in outs]
    return concat(expanded, axis=-3)


def init_block_params(params: dict, prefix: str, d: int, ff_hidden: int,
                      rng: np.random.Generator) -> None:
    init_attention_params(params, f"{prefix}.sa", d, rng)
    init_feedforward_params(params, f"{prefix}.ff1", d, ff_hidden, rng)
    init_attention_params(params, f"{prefix}.ca", d, rng)
    init_feedforward_params(params, f"{prefix}.ff2", d, ff_hidden, rng)


def make_head_feature_maps(d_h: int, m: int, heads: int, rng: np.random.Generator,
                           temperature_scaled: bool = True) -> list[FeatureMap]:
    seeds = rng.integers(0, 2**31 - 1, size=heads)
    return [FeatureMap.draw(d_h, m, int(s), temperature_scaled) for s in seeds]


def attention_block(queries: TensorND, context: TensorND, cfg: AttentionConfig,
                    params: dict, prefix: str,
                    fms_self: list[FeatureMap], fms_cross: list[FeatureMap]) -> TensorND:
    """One generator block over query tokens attending to context tokens.

    Bidirectional linear self-attention, feedforward, linear cross-attention
    to the (unmasked) context, feedforward; all pre-norm residual sublayers.
    """
    if queries.shape[-1] != context.shape[-1]:
        raise DimensionError(
            f"token widths disagree: queries {queries.shape} vs context {context.shape}")
    x = multihead_linear_attention(queries, queries, params, f"{prefix}.sa", fms_self, cfg)
    x = feedforward(x, params, f"{prefix}.ff1")
    x = multihead_linear_attention(x, context, params, f"{prefix}.ca", fms_cross, cfg)
    return feedforward(x, params, f"{prefix}.ff2")
