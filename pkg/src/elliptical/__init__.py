"""Self-attention with a diagonal Mahalanobis metric.

The metric stretches query neighborhoods along directions in which the
underlying key-to-value function varies least; its weights are estimated
from the change in value vectors between consecutive layers.  The package
bundles the metric itself, the variability estimators with their oracles,
attention kernels with analytic sensitivity bounds, a kernel-regression
laboratory, and a toy character-level transformer with collapse and
robustness diagnostics.
"""

from .attention import (
    AttentionConfig,
    AttentionOutput,
    elliptical_attention,
    masa,
    masa_jacobian,
    standard_attention,
)
from .estimators import (
    SyntheticFunction,
    VariabilityEstimate,
    estimate_consistent,
    estimate_overlayers,
    oracle_variability,
)
from .metric import (
    EllipticalWeights,
    apply_scaling,
    compute_kappa,
    identity_weights,
    mahalanobis_distance,
    robustness_bound,
)
from .model import ModelConfig, TrainParams, corrupt_tokens, diagnose, forward, train
from .numerics import finite_diff_jacobian, make_rng, matmul, softmax_rows
from .nwlab import NWDataset, nw_estimate, run_sparse_mse_experiment

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "EllipticalWeights",
    "ModelConfig",
    "NWDataset",
    "SyntheticFunction",
    "TrainParams",
    "VariabilityEstimate",
    "apply_scaling",
    "compute_kappa",
    "corrupt_tokens",
    "diagnose",
    "elliptical_attention",
    "estimate_consistent",
    "estimate_overlayers",
    "finite_diff_jacobian",
    "forward",
    "identity_weights",
    "mahalanobis_distance",
    "make_rng",
    "masa",
    "masa_jacobian",
    "matmul",
    "nw_estimate",
    "oracle_variability",
    "robustness_bound",
    "run_sparse_mse_experiment",
    "softmax_rows",
    "standard_attention",
    "train",
]
