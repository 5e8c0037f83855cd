"""Estimators of coordinate-wise variability: the expected L1 norm of a
function's i-th directional derivative under the key marginal.

Three routes are provided.  The layer-difference estimator reads it off the
change in value vectors between consecutive layers and is cheap enough to
run inside attention.  The centered-difference estimator perturbs a
materialized prediction function twice per dimension and is consistent but
only affordable offline.  The Monte-Carlo Jacobian oracle brute-forces the
definition on synthetic functions and serves as ground truth in tests.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .numerics import (
    EvaluationError,
    ParameterError,
    ShapeError,
    as_matrix,
    derive_rng,
    finite_diff_jacobian,
)

ESTIMATOR_KINDS = ("overlayers", "consistent", "oracle")

_NS_CONSISTENCY = 31


@dataclass(frozen=True)
class VariabilityEstimate:
    """Raw (pre-scaling) per-dimension variability estimates."""

    raw: np.ndarray
    estimator: str
    delta_or_t: float

    def __post_init__(self):
        if self.estimator not in ESTIMATOR_KINDS:
            raise ParameterError(f"unknown estimator kind {self.estimator!r}")
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 1 or not np.all(np.isfinite(raw)) or np.any(raw < 0):
            raise ParameterError("raw estimates must be finite nonnegative 1-D")
        object.__setattr__(self, "raw", raw)


@dataclass(frozen=True)
class SyntheticFunction:
    """A target function from the fixed catalog, evaluable in batches.

    ``fn`` maps an (n, dim) array to (n, out_dim).  When the per-coordinate
    variability under the declared marginal is known in closed form it is
    exposed via ``analytic_variability``; ``gradient_bounds`` holds
    sup-norm bounds G_i on the i-th column of the Jacobian where available.
    """

    name: str
    dim: int
    out_dim: int
    fn: Callable[[np.ndarray], np.ndarray]
    analytic_variability: np.ndarray | None = None
    gradient_bounds: np.ndarray | None = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ShapeError(f"{self.name} expects points of dimension {self.dim}")
        out = np.asarray(self.fn(pts), dtype=np.float64)
        if out.shape != (pts.shape[0], self.out_dim):
            raise ShapeError(f"{self.name} returned shape {out.shape}")
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"{self.name} produced non-finite output")
        return out[0] if single else out


# ---------------------------------------------------------------------------
# Catalog.  Analytic variabilities are stated for keys uniform on
# [-pi, pi]^dim, where E|cos(w x)| = 2/pi exactly for integer frequency w.
# ---------------------------------------------------------------------------


def linear_function(a: np.ndarray) -> SyntheticFunction:
    """f(x) = A x.  Variability_i = sum_j |A_ji|; G_i = ||A column i||_2."""
    a = as_matrix(a)
    return SyntheticFunction(
        name="linear",
        dim=a.shape[1],
        out_dim=a.shape[0],
        fn=lambda pts: pts @ a.T,
        analytic_variability=np.abs(a).sum(axis=0),
        gradient_bounds=np.linalg.norm(a, axis=0),
    )


def separable_sinusoid(amplitudes, frequencies, phases=None) -> SyntheticFunction:
    """f_i(x) = a_i sin(w_i x_i + phi_i): output i depends on input i only."""
    amp = np.asarray(amplitudes, dtype=np.float64)
    freq = np.asarray(frequencies, dtype=np.float64)
    phase = np.zeros_like(amp) if phases is None else np.asarray(phases, dtype=np.float64)
    if amp.shape != freq.shape or amp.shape != phase.shape or amp.ndim != 1:
        raise ShapeError("amplitudes, frequencies and phases must align")
    if not np.all(freq == np.round(freq)):
        raise ParameterError("integer frequencies required for the analytic values")
    return SyntheticFunction(
        name="separable_sinusoid",
        dim=amp.size,
        out_dim=amp.size,
        fn=lambda pts: amp * np.sin(freq * pts + phase),
        analytic_variability=np.abs(amp * freq) * (2.0 / np.pi),
        gradient_bounds=np.abs(amp * freq),
    )


def ranking_catalog(dim: int = 6) -> SyntheticFunction:
    """Separable target with well-separated per-coordinate variabilities.

    The canonical instance for checking that estimators recover the ranking
    of coordinate-wise variability.
    """
    return separable_sinusoid(np.linspace(0.25, 1.5, dim), np.ones(dim))


def sparse_sinusoid(dim: int, active, amplitudes, frequencies) -> SyntheticFunction:
    """Scalar f(x) = sum over active coordinates of a_i sin(w_i x_i).

    Variability is zero in every inactive direction: the sparse regime.
    """
    active = list(active)
    amp = np.asarray(amplitudes, dtype=np.float64)
    freq = np.asarray(frequencies, dtype=np.float64)
    if len(active) != amp.size or amp.size != freq.size:
        raise ShapeError("active, amplitudes, frequencies must align")
    if not np.all(freq == np.round(freq)):
        raise ParameterError("integer frequencies required for the analytic values")
    variability = np.zeros(dim)
    bounds = np.zeros(dim)
    for pos, i in enumerate(active):
        variability[i] = abs(amp[pos] * freq[pos]) * (2.0 / np.pi)
        bounds[i] = abs(amp[pos] * freq[pos])

    def fn(pts):
        out = np.zeros((pts.shape[0], 1))
        for pos, i in enumerate(active):
            out[:, 0] += amp[pos] * np.sin(freq[pos] * pts[:, i])
        return out

    return SyntheticFunction(
        name="sparse_sinusoid",
        dim=dim,
        out_dim=1,
        fn=fn,
        analytic_variability=variability,
        gradient_bounds=bounds,
    )


def piecewise_step(
    low_value, high_value, coord: int = 0, threshold: float = 0.0, dim: int = 2
) -> SyntheticFunction:
    """Two constant pieces split along one coordinate; derivative is 0 a.e."""
    lo = np.asarray(low_value, dtype=np.float64)
    hi = np.asarray(high_value, dtype=np.float64)
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ShapeError("piece values must be equal-length vectors")

    def fn(pts):
        mask = pts[:, coord] >= threshold
        return np.where(mask[:, None], hi[None, :], lo[None, :])

    return SyntheticFunction(
        name="piecewise_step", dim=dim, out_dim=lo.size, fn=fn
    )


def uniform_sampler(low: float, high: float, dim: int):
    """Sampler for the uniform-box key marginal used across experiments."""

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(low, high, (n, dim))

    return sample


# ---------------------------------------------------------------------------
# Estimators.
# ---------------------------------------------------------------------------


def estimate_overlayers(v_curr, v_prev, delta: float) -> VariabilityEstimate:
    """Column-wise mean absolute difference of consecutive-layer values / delta.

    The inputs are read as plain arrays and never participate in gradient
    computation; callers inside a training graph must pass detached copies.
    """
    if delta <= 0:
        raise ParameterError("delta must be positive")
    v_curr = as_matrix(v_curr)
    v_prev = as_matrix(v_prev)
    if v_curr.shape != v_prev.shape:
        raise ShapeError(f"value shapes differ: {v_curr.shape} vs {v_prev.shape}")
    raw = np.mean(np.abs(v_curr - v_prev), axis=0) / delta
    return VariabilityEstimate(raw, "overlayers", delta)


def prefix_overlayers_raw(
    v_curr, v_prev, delta: float, min_samples: int = 1
) -> np.ndarray:
    """Per-position variant: row t averages |v_curr - v_prev| over rows <= t.

    Needed wherever outputs at position t may only depend on positions <= t
    (causal decoding); row t of the result uses only the first t + 1 rows.
    Rows with fewer than ``min_samples`` positions behind them are zeroed,
    which downstream scaling turns into the identity metric: a near-empty
    prefix carries too little signal to estimate variability from.
    """
    if delta <= 0:
        raise ParameterError("delta must be positive")
    if min_samples < 1:
        raise ParameterError("min_samples must be at least 1")
    v_curr = as_matrix(v_curr)
    v_prev = as_matrix(v_prev)
    if v_curr.shape != v_prev.shape:
        raise ShapeError(f"value shapes differ: {v_curr.shape} vs {v_prev.shape}")
    diffs = np.abs(v_curr - v_prev) / delta
    counts = np.arange(1, diffs.shape[0] + 1, dtype=np.float64)[:, None]
    raw = np.cumsum(diffs, axis=0) / counts
    raw[: min_samples - 1] = 0.0
    return raw


def estimate_consistent(
    f: Callable[[np.ndarray], np.ndarray], sample_points, t: float
) -> VariabilityEstimate:
    """Centered-difference estimate: mean ||f(x + t e_i) - f(x - t e_i)||_1 / 2t.

    ``f`` may be a catalog function or any fitted predictor mapping (n, dim)
    points to (n, out_dim) values; it is evaluated 2 * dim times per sample
    point, which is why this estimator stays out of the attention layers.
    """
    if t <= 0:
        raise ParameterError("t must be positive")
    pts = as_matrix(sample_points)
    dim = pts.shape[1]
    raw = np.empty(dim, dtype=np.float64)
    for i in range(dim):
        xp = pts.copy()
        xm = pts.copy()
        xp[:, i] += t
        xm[:, i] -= t
        up = np.asarray(f(xp), dtype=np.float64)
        um = np.asarray(f(xm), dtype=np.float64)
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(um))):
            raise EvaluationError("predictor produced non-finite values")
        raw[i] = np.mean(np.sum(np.abs(up - um), axis=1)) / (2.0 * t)
    return VariabilityEstimate(raw, "consistent", t)


def oracle_variability(
    f: SyntheticFunction,
    mu_sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_mc: int = 200,
    rng: np.random.Generator | None = None,
    h: float = 1e-5,
) -> VariabilityEstimate:
    """Brute-force Monte Carlo of E ||J_f(k) e_i||_1 with numeric Jacobians."""
    if rng is None:
        raise ParameterError("oracle_variability requires an rng")
    pts = as_matrix(mu_sampler(rng, n_mc))
    raw = np.zeros(pts.shape[1], dtype=np.float64)
    for x in pts:
        jac = finite_diff_jacobian(lambda v: f(v), x, h)
        raw += np.sum(np.abs(jac), axis=0)
    raw /= n_mc
    return VariabilityEstimate(raw, "oracle", h)


@dataclass(frozen=True)
class LayerPair:
    """Values (and the keys behind them) at two consecutive layers."""

    v_curr: np.ndarray
    v_prev: np.ndarray
    k_curr: np.ndarray
    k_prev: np.ndarray


def simulate_layer_pair(
    f: SyntheticFunction,
    n: int,
    delta: float,
    noise_std: float,
    rng: np.random.Generator,
    jitter: float = 0.1,
    low: float = -np.pi,
    high: float = np.pi,
) -> LayerPair:
    """Sample the layer-to-layer value generating process.

    Keys move by a random-sign step whose magnitude has mean ``delta`` and
    small relative spread ``jitter``; values carry additive Gaussian noise
    of standard deviation ``noise_std`` at both layers.
    """
    if delta <= 0:
        raise ParameterError("delta must be positive")
    k_prev = rng.uniform(low, high, (n, f.dim))
    steps = np.abs(delta * (1.0 + jitter * rng.standard_normal((n, f.dim))))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n, f.dim))
    k_curr = k_prev + signs * steps
    v_prev = f(k_prev) + noise_std * rng.standard_normal((n, f.out_dim))
    v_curr = f(k_curr) + noise_std * rng.standard_normal((n, f.out_dim))
    return LayerPair(v_curr=v_curr, v_prev=v_prev, k_curr=k_curr, k_prev=k_prev)


def noise_drift_slack(
    f: SyntheticFunction,
    noise_std: float,
    n: int,
    rng: np.random.Generator,
    delta: float = 1.0,
) -> float:
    """Worst-coordinate excess of |m_i - E|f_i change|| over its noise bound.

    The layer-difference estimate may drift from the noiseless mean absolute
    change by at most (2 / sqrt(pi)) * noise_std; Monte Carlo sampling adds
    slack 3 * noise_std / sqrt(n).  Nonpositive return means the bound held
    in every coordinate.
    """
    pair = simulate_layer_pair(f, n, delta, noise_std, rng)
    m = estimate_overlayers(pair.v_curr, pair.v_prev, delta).raw
    clean = np.mean(np.abs(f(pair.k_curr) - f(pair.k_prev)), axis=0) / delta
    gap = np.abs(m - clean)
    allowance = (2.0 / np.sqrt(np.pi)) * noise_std + 3.0 * noise_std / np.sqrt(n)
    return float(np.max(gap) - allowance)


def consistency_error_curve(
    f: SyntheticFunction,
    sample_sizes,
    t: float,
    seeds: int,
    seed: int = 0,
    low: float = -np.pi,
    high: float = np.pi,
) -> tuple[np.ndarray, np.ndarray]:
    """Seed-mean centered-difference error against the analytic variability.

    Returns (sample_sizes, mean_errors); the error at each sample size is
    averaged over coordinates with nonzero analytic variability and over
    seeds, exposing the Monte-Carlo convergence rate.
    """
    if f.analytic_variability is None:
        raise ParameterError(f"{f.name} has no analytic variability")
    active = f.analytic_variability > 0
    sizes = np.asarray(list(sample_sizes), dtype=np.int64)
    errors = np.zeros(sizes.size)
    for idx, n in enumerate(sizes):
        per_seed = []
        for s in range(seeds):
            rng = derive_rng(seed, _NS_CONSISTENCY, idx * 10_000 + s)
            pts = rng.uniform(low, high, (int(n), f.dim))
            est = estimate_consistent(f, pts, t)
            per_seed.append(
                np.mean(np.abs(est.raw[active] - f.analytic_variability[active]))
            )
        errors[idx] = float(np.mean(per_seed))
    return sizes, errors
