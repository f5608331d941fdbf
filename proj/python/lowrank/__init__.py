"""Low-rank bias of SGD: training and verification toolkit."""

from ._core import (
    LowrankError,
    Network,
    distance_to_rank,
    effective_rank,
    gen_synthetic,
    k_for_epsilon,
    numerical_rank,
    run_experiment,
    singular_values,
    svd,
    truncated,
)

__all__ = [
    "LowrankError",
    "Network",
    "distance_to_rank",
    "effective_rank",
    "gen_synthetic",
    "k_for_epsilon",
    "numerical_rank",
    "run_experiment",
    "singular_values",
    "svd",
    "truncated",
]
