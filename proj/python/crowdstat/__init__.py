"""Post-sampling weights, spatial effective sample size and rank tests for
crowdsourced line lists (bindings to the C++ core)."""

from ._core import (
    ConfigError,
    InputError,
    StatError,
    adjusted_test,
    effective_sample_size,
    kish_effective_size,
    kruskal_wallis,
    largest_remainder_allocation,
    mann_whitney,
    morans_i,
    parse_line_list,
    post_sampling_weights,
    rook_grid,
    run_experiment,
    sample_variance_n_eff,
    version,
    weighted_mean,
    weighted_median,
)

__version__ = version()

__all__ = [
    "ConfigError",
    "InputError",
    "StatError",
    "adjusted_test",
    "effective_sample_size",
    "kish_effective_size",
    "kruskal_wallis",
    "largest_remainder_allocation",
    "mann_whitney",
    "morans_i",
    "parse_line_list",
    "post_sampling_weights",
    "rook_grid",
    "run_experiment",
    "sample_variance_n_eff",
    "weighted_mean",
    "weighted_median",
]
