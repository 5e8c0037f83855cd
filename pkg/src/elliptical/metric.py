"""Diagonal Mahalanobis machinery: relevance-weight scaling modes, the
distance they induce, per-key sensitivity coefficients, and the resulting
worst-case perturbation bound for the weighted-softmax estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParameterError, ShapeError, as_matrix, as_vector

SCALING_MODES = ("maxscale", "meanscale", "unscaled", "identity", "random")

#: Clamp applied to every relevance weight so the induced quadratic form
#: stays positive-definite and the distance is a true metric.
DEFAULT_FLOOR = 1e-6


@dataclass(frozen=True)
class EllipticalWeights:
    """Per-dimension relevance weights m defining d(q, k) = sqrt((q-k)' M (q-k)).

    M = diag(m); every entry is >= floor > 0.
    """

    m: np.ndarray
    mode: str = "identity"
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        m = as_vector(self.m)
        if self.mode not in SCALING_MODES:
            raise ParameterError(f"unknown scaling mode {self.mode!r}")
        if not 0.0 < self.floor < 1.0:
            raise ParameterError("floor must lie in (0, 1)")
        if np.any(m < self.floor):
            raise ParameterError("weights must be >= floor")
        if self.mode == "identity" and not np.all(m == 1.0):
            raise ParameterError("identity weights must all equal 1")
        if self.mode in ("maxscale", "random") and m.max() != 1.0:
            raise ParameterError(f"{self.mode} weights must have max exactly 1")
        object.__setattr__(self, "m", m)

    @property
    def dim(self) -> int:
        return self.m.size


def identity_weights(dim: int, floor: float = DEFAULT_FLOOR) -> EllipticalWeights:
    """All-ones weights: the induced distance is Euclidean."""
    return EllipticalWeights(np.ones(dim), "identity", floor)


def apply_scaling(
    raw,
    mode: str,
    floor: float = DEFAULT_FLOOR,
    rng: np.random.Generator | None = None,
) -> EllipticalWeights:
    """Turn raw nonnegative variability estimates into usable weights.

    maxscale divides by the maximum (the most variable direction gets weight
    exactly 1), meanscale by the mean (entries above 1 are kept), unscaled
    only clamps.  identity ignores ``raw``; random ignores it too and draws
    fresh uniform [0, 1] weights which are then maxscaled.  An all-zero
    ``raw`` falls back to identity weights in every mode, so a degenerate
    estimate can never produce a degenerate kernel.
    """
    if mode not in SCALING_MODES:
        raise ParameterError(f"unknown scaling mode {mode!r}")
    raw = as_vector(raw)
    if np.any(raw < 0):
        raise ParameterError("raw variability estimates must be nonnegative")
    dim = raw.size
    if mode == "identity" or not np.any(raw > 0):
        return EllipticalWeights(np.ones(dim), mode, floor)
    if mode == "maxscale":
        m = np.maximum(raw / raw.max(), floor)
    elif mode == "meanscale":
        m = np.maximum(raw / raw.mean(), floor)
    elif mode == "unscaled":
        m = np.maximum(raw, floor)
    else:  # random
        if rng is None:
            raise ParameterError("random scaling mode requires an rng")
        u = rng.uniform(0.0, 1.0, dim)
        if not np.any(u > 0):
            return EllipticalWeights(np.ones(dim), mode, floor)
        m = np.maximum(u / u.max(), floor)
    return EllipticalWeights(m, mode, floor)


def mahalanobis_distance(q, k, w: EllipticalWeights) -> float:
    """sqrt((q - k)' diag(m) (q - k)); zero iff q == k since m >= floor > 0."""
    q = as_vector(q)
    k = as_vector(k)
    if q.size != k.size or q.size != w.dim:
        raise ShapeError(f"length mismatch: q={q.size}, k={k.size}, m={w.dim}")
    d = q - k
    return float(np.sqrt(np.sum(w.m * d * d)))


def compute_kappa(keys) -> np.ndarray:
    """Sensitivity coefficients kappa[i, j] = |k_j^i| / 4 + sum_{s != j} |k_s^i|.

    Indexed by input dimension i and key index j, these bound how fast the
    weighted softmax can move in direction i, per unit weight m_i.  Computed
    with plain sequential accumulation so a straightforward two-loop
    reference reproduces the result exactly.
    """
    keys = as_matrix(keys)
    n, dim = keys.shape
    a = np.abs(keys)
    kappa = np.empty((dim, n), dtype=np.float64)
    for i in range(dim):
        col = a[:, i]
        for j in range(n):
            # accumulate in the formula's left-to-right order
            acc = col[j] / 4.0
            for s in range(n):
                if s != j:
                    acc += col[s]
            kappa[i, j] = acc
    return kappa


def robustness_bound(keys, values, w: EllipticalWeights) -> float:
    """Worst-case output change per unit query perturbation.

    Returns sum_j sqrt(tr(K_j^2 M^2)) * ||v_j|| with K_j = diag(kappa[:, j]).
    For the unit-temperature weighted-softmax estimator h(q) = sum_j p_j v_j
    this dominates ||h(q) - h(q + eps)|| / ||eps|| for every perturbation.
    """
    keys = as_matrix(keys)
    values = as_matrix(values)
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(
            f"keys and values disagree on row count: {keys.shape} vs {values.shape}"
        )
    if keys.shape[1] != w.dim:
        raise ShapeError(f"keys have dim {keys.shape[1]}, weights have {w.dim}")
    kappa = compute_kappa(keys)  # (dim, n)
    per_key = np.sqrt(np.sum((kappa * w.m[:, None]) ** 2, axis=0))  # (n,)
    return float(np.sum(per_key * np.linalg.norm(values, axis=1)))
