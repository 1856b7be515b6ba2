"""Thompson-sampling bandits with random-effects pooling across users."""

from .core_model import (
    Design,
    FeatureMap,
    GaussianPosterior,
    Hyperparams,
    Observation,
    Priors,
    kernel,
    marginal_log_likelihood,
    posterior,
    posteriors,
)
from .hyperopt import HyperSearchConfig, fit_hyperparams
from .policies import PolicyKind, UpdateSchedule, action_probability, run_trial

__all__ = [
    "Design", "FeatureMap", "GaussianPosterior", "Hyperparams", "Observation", "Priors",
    "kernel", "marginal_log_likelihood", "posterior", "posteriors", "HyperSearchConfig",
    "fit_hyperparams", "PolicyKind", "UpdateSchedule", "action_probability", "run_trial",
]
