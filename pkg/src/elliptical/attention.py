"""Attention kernels over dense matrices: the plain scaled dot-product form,
the metric-weighted softmax operator with its analytic Jacobian, and the
full metric-weighted attention that derives its weights from the change in
value vectors between consecutive layers.

All variants share one kernel in which the query matrix is scaled by the
relevance weights before the dot product, so forcing the weights to ones
reproduces the plain form bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import estimate_overlayers, prefix_overlayers_raw
from .metric import EllipticalWeights, apply_scaling
from .numerics import ParameterError, ShapeError, as_matrix, as_vector, softmax_rows


@dataclass(frozen=True)
class AttentionConfig:
    """Shared knobs for the attention kernels.

    ``temperature`` defaults to sqrt(head_dim); it stays there even when the
    metric rescales the logits.
    """

    head_dim: int
    weights: EllipticalWeights
    temperature: float | None = None
    causal: bool = False

    def __post_init__(self):
        temp = self.temperature
        if temp is None:
            temp = float(np.sqrt(self.head_dim))
            object.__setattr__(self, "temperature", temp)
        if temp <= 0:
            raise ParameterError("temperature must be positive")
        if self.weights.dim != self.head_dim:
            raise ShapeError(
                f"weights have dim {self.weights.dim}, head_dim is {self.head_dim}"
            )


@dataclass(frozen=True)
class AttentionOutput:
    h: np.ndarray
    attn: np.ndarray
    logits: np.ndarray
    metric: np.ndarray  # (dim,) weights, or (n, dim) rows in the causal path


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf strictly above."""
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def weighted_kernel(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    m: np.ndarray,
    temperature: float,
    causal: bool,
) -> AttentionOutput:
    """softmax((q * m) @ k' / temperature) @ v; ``m`` broadcasts over rows."""
    logits = ((q * m) @ k.T) / temperature
    if causal:
        logits = logits + causal_mask(q.shape[0])
    attn = softmax_rows(logits)
    return AttentionOutput(h=attn @ v, attn=attn, logits=logits, metric=m)


def _check_qkv(q, k, v, causal: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys vs {v.shape[0]} values")
    if causal and q.shape[0] != k.shape[0]:
        raise ShapeError("causal masking requires one query per key position")
    return q, k, v


def standard_attention(q, k, v, cfg: AttentionConfig) -> AttentionOutput:
    """Plain scaled dot-product attention; requires identity weights."""
    q, k, v = _check_qkv(q, k, v, cfg.causal)
    if not np.all(cfg.weights.m == 1.0):
        raise ParameterError("standard attention requires identity weights")
    return weighted_kernel(q, k, v, np.ones(cfg.head_dim), cfg.temperature, cfg.causal)


def masa(q, keys, w: EllipticalWeights) -> np.ndarray:
    """Metric-weighted softmax over keys at unit temperature.

    Component j is exp(q' M k_j) normalized over all keys.
    """
    q = as_vector(q)
    keys = as_matrix(keys)
    if keys.shape[1] != q.size or q.size != w.dim:
        raise ShapeError(
            f"dimension mismatch: q={q.size}, keys={keys.shape}, m={w.dim}"
        )
    logits = keys @ (w.m * q)
    return softmax_rows(logits[None, :])[0]


def masa_jacobian(q, keys, w: EllipticalWeights) -> np.ndarray:
    """Analytic Jacobian of the metric-weighted softmax, shape (n_keys, dim).

    Entry (j, i) is m_i * (k_j^i - sum_s k_s^i p_s) * p_j, which is linear in
    m_i and bounded in magnitude by the per-key sensitivity coefficient
    kappa[i, j] times m_i.
    """
    p = masa(q, keys, w)
    keys = as_matrix(keys)
    centered = keys - p @ keys  # (n, dim) minus the p-weighted key average
    return p[:, None] * centered * w.m[None, :]


def elliptical_attention(
    q,
    k,
    v,
    v_prev,
    cfg: AttentionConfig,
    delta: float,
    rng: np.random.Generator | None = None,
) -> AttentionOutput:
    """Attention whose metric is estimated from the change in values.

    Raw per-dimension variability comes from the layer-difference estimator
    on (v, v_prev); ``cfg.weights`` contributes only its scaling mode and
    floor.  The weight computation is a plain array calculation with no
    gradient semantics.  In the causal case the estimate for query position
    t is restricted to value rows <= t so that outputs never depend on later
    positions, and scaling is applied row by row.
    """
    q, k, v = _check_qkv(q, k, v, cfg.causal)
    v_prev = as_matrix(v_prev)
    if v_prev.shape != v.shape:
        raise ShapeError(f"v_prev shape {v_prev.shape} != v shape {v.shape}")
    mode, floor = cfg.weights.mode, cfg.weights.floor
    if mode == "identity":
        m = np.ones(cfg.head_dim)
    elif cfg.causal:
        raw_rows = prefix_overlayers_raw(v, v_prev, delta)
        m = np.vstack(
            [apply_scaling(row, mode, floor, rng).m for row in raw_rows]
        )
    else:
        raw = estimate_overlayers(v, v_prev, delta).raw
        m = apply_scaling(raw, mode, floor, rng).m
    return weighted_kernel(q, k, v, m, cfg.temperature, cfg.causal)


def minmax_scale_rows(matrix) -> np.ndarray:
    """Scale each row to [0, 1] for heatmap export; constant rows map to 0."""
    m = as_matrix(matrix)
    lo = m.min(axis=1, keepdims=True)
    span = m.max(axis=1, keepdims=True) - lo
    out = np.zeros_like(m)
    np.divide(m - lo, span, out=out, where=span > 0)
    return out
