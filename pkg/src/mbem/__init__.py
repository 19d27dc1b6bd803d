"""Mixture-model estimation via batch, online, mini-batch, and truncated
mini-batch EM for exponential-family components, with an experiment harness.
"""

__version__ = "0.1.0"

from .engine import (
    DEFAULT_LEARNING_RATE,
    EmState,
    LearningRate,
    RunConfig,
    RunRecord,
    TruncationRegion,
    batch_em_step,
    init_suffstats,
    minibatch_step,
    polyak_update,
    region_contains,
    reset_stat,
    run,
    schedule,
    truncated_minibatch_step,
)
from .families import (
    Exponential,
    FamilySpec,
    Gaussian,
    MixtureParams,
    Poisson,
    SuffStats,
    family_of,
    log_density,
    mean_sbar,
    responsibilities,
    sample,
    sbar,
    theta_bar,
)
from .metrics import (
    MetricReport,
    adjusted_rand_index,
    dataset_loglik,
    map_labels,
    squared_error,
)

__all__ = [
    "DEFAULT_LEARNING_RATE",
    "EmState",
    "Exponential",
    "FamilySpec",
    "Gaussian",
    "LearningRate",
    "MetricReport",
    "MixtureParams",
    "Poisson",
    "RunConfig",
    "RunRecord",
    "SuffStats",
    "TruncationRegion",
    "adjusted_rand_index",
    "batch_em_step",
    "dataset_loglik",
    "family_of",
    "init_suffstats",
    "log_density",
    "map_labels",
    "mean_sbar",
    "minibatch_step",
    "polyak_update",
    "region_contains",
    "reset_stat",
    "responsibilities",
    "run",
    "sample",
    "sbar",
    "schedule",
    "squared_error",
    "theta_bar",
    "truncated_minibatch_step",
]
