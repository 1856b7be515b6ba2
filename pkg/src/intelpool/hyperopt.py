"""Empirical-Bayes fitting of the random-effect and noise variances.

The search runs Nelder-Mead over log-variances (one per masked coordinate of
a diagonal ``Sigma_u`` plus ``sigma_eps2``) with a few jittered restarts, and
returns the best point it ever evaluated.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from .core_model import Design, Hyperparams, Priors, SufficientStats, loglik_from_stats
from .linalg import psd_factor

log = logging.getLogger(__name__)


class HyperoptError(RuntimeError):
    pass


@dataclass(frozen=True)
class HyperSearchConfig:
    """Search settings. Bounds are natural-log variances."""

    log_bounds_sigma_u: tuple[float, float] = (float(np.log(1e-6)), float(np.log(1e4)))
    log_bounds_sigma_eps2: tuple[float, float] = (float(np.log(1e-6)), float(np.log(1e6)))
    restarts: int = 3
    tol: float = 1e-6
    max_evals: int = 2000
    start_jitter: float = 1.0
    simplex_step: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.log_bounds_sigma_u, self.log_bounds_sigma_eps2):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError("log bounds must be finite with lower < upper")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.restarts < 1 or self.max_evals < 1:
            raise ValueError("restarts and max_evals must be at least 1")

    @classmethod
    def from_variances(cls, sigma_u_bounds=(1e-6, 1e4), sigma_eps2_bounds=(1e-6, 1e6), **kw):
        return cls(tuple(float(np.log(float(b))) for b in sigma_u_bounds),
                   tuple(float(np.log(float(b))) for b in sigma_eps2_bounds), **kw)


class Evaluation(NamedTuple):
    log_params: tuple[float, ...]
    loglik: float
    error: str | None = None


@dataclass
class HyperFit:
    hyperparams: Hyperparams
    loglik: float
    initial_loglik: float
    evaluations: list[Evaluation] = field(default_factory=list)
    boundary_hits: list[str] = field(default_factory=list)

    def to_records(self):
        return [{"log_params": list(e.log_params), "loglik": e.loglik, "error": e.error}
                for e in self.evaluations]

    def dump(self, path):
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")


def _unpack(x, mask):
    k = int(mask.sum())
    return Hyperparams.diagonal(mask, np.exp(x[:k]), float(np.exp(x[k])))


def _pack(hp: Hyperparams, mask):
    diag = np.diag(hp.sigma_u)[mask]
    with np.errstate(divide="ignore"):
        return np.concatenate([np.log(diag), [np.log(hp.sigma_eps2)]])


def _resolve_mask(init: Hyperparams | None, mask, feature_map):
    if mask is not None:
        return np.asarray(mask, dtype=bool)
    if init is not None and init.mask is not None:
        return init.mask
    fm_mask = getattr(feature_map, "random_effect_mask", None)
    if fm_mask is not None:
        return np.asarray(fm_mask, dtype=bool)
    raise ValueError("random-effect mask must be given via mask, init or feature_map")


def search_hyperparams_from_stats(stats: SufficientStats, priors: Priors, mask,
                                  cfg: HyperSearchConfig = HyperSearchConfig(),
                                  init: Hyperparams | None = None,
                                  rng: np.random.Generator | None = None) -> HyperFit:
    """Maximize the marginal likelihood given precomputed statistics."""
    if stats.n < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    mask = np.asarray(mask, dtype=bool)
    if mask.size != priors.dim:
        raise ValueError("mask length must equal the model dimension")
    k = int(mask.sum())
    lower = np.array([cfg.log_bounds_sigma_u[0]] * k + [cfg.log_bounds_sigma_eps2[0]])
    upper = np.array([cfg.log_bounds_sigma_u[1]] * k + [cfg.log_bounds_sigma_eps2[1]])
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    w_theta = psd_factor(priors.sigma_theta)

    evaluations: list[Evaluation] = []

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        try:
            value = loglik_from_stats(stats, priors, _unpack(x, mask), w_theta)
            if not np.isfinite(value):
                raise FloatingPointError("non-finite log-likelihood")
            evaluations.append(Evaluation(tuple(x.tolist()), float(value)))
            return value
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            evaluations.append(Evaluation(tuple(x.tolist()), float("-inf"), str(exc)))
            return float("-inf")

    def objective(x):
        value = evaluate(x)
        return -value if np.isfinite(value) else 1e300

    if init is None:
        x0 = 0.5 * (lower + upper)
        x0[:k] = 0.0
        x0[k] = np.log(max(stats.sq.sum() / stats.n, 1e-6))
        x0 = np.clip(x0, lower, upper)
        initial_ll = evaluate(x0)
    else:
        x0 = _pack(init, mask)
        initial_ll = evaluate(np.where(np.isfinite(x0), x0, lower))
        x0 = np.clip(np.where(np.isfinite(x0), x0, lower), lower, upper)

    dim = k + 1
    for restart in range(cfg.restarts):
        start = x0 if restart == 0 else np.clip(x0 + cfg.start_jitter * rng.standard_normal(dim),
                                                lower, upper)
        simplex = np.vstack([start] + [start + cfg.simplex_step * np.eye(dim)[j] for j in range(dim)])
        over = simplex > upper
        simplex[over] = np.vstack([start] * (dim + 1))[over] - cfg.simplex_step
        simplex = np.clip(simplex, lower, upper)
        minimize(objective, start, method="Nelder-Mead", bounds=list(zip(lower, upper)),
                 options={"initial_simplex": simplex, "xatol": cfg.tol, "fatol": cfg.tol,
                          "maxfev": cfg.max_evals})

    finite = [e for e in evaluations if e.error is None]
    if not finite:
        raise HyperoptError(f"every evaluation failed; last error: {evaluations[-1].error}")
    best = max(range(len(evaluations)),
               key=lambda j: (evaluations[j].loglik, -j) if evaluations[j].error is None
               else (float("-inf"), -j))
    best_eval = evaluations[best]
    hp = _unpack(np.array(best_eval.log_params), mask)

    hits = []
    xb = np.array(best_eval.log_params)
    names = [f"sigma_u[{j}]" for j in np.flatnonzero(mask)] + ["sigma_eps2"]
    for name, v, lo, hi in zip(names, xb, lower, upper):
        if np.isclose(v, lo, atol=1e-3) or np.isclose(v, hi, atol=1e-3):
            hits.append(name)
    if hits:
        log.info("hyperparameter fit on bounds: %s", ", ".join(hits))
    return HyperFit(hp, best_eval.loglik, initial_ll, evaluations, hits)


def search_hyperparams(log_, feature_map, priors: Priors,
                       cfg: HyperSearchConfig = HyperSearchConfig(),
                       init: Hyperparams | None = None, mask=None, rng=None) -> HyperFit:
    mask = _resolve_mask(init, mask, feature_map)
    stats = SufficientStats.from_design(Design.from_log(log_, feature_map, priors.dim))
    return search_hyperparams_from_stats(stats, priors, mask, cfg, init, rng)


def fit_hyperparams(log_, feature_map, priors: Priors,
                    cfg: HyperSearchConfig = HyperSearchConfig(),
                    init: Hyperparams | None = None, mask=None, rng=None) -> Hyperparams:
    """Empirical-Bayes estimate of ``(Sigma_u, sigma_eps2)``.

    Parameters
    ----------
    log_ : list of Observation
        At least two tuples.
    feature_map : callable
        ``phi(state, action)``; its ``random_effect_mask`` is used when
        neither ``mask`` nor ``init.mask`` is given.
    priors : Priors
        Held fixed.
    cfg : HyperSearchConfig
    init : Hyperparams, optional
        Starting point; the result never scores below it.
    """
    return search_hyperparams(log_, feature_map, priors, cfg, init, mask, rng).hyperparams


class ProfilePoint(NamedTuple):
    hyperparams: Hyperparams
    loglik: float
    error: str | None = None


def likelihood_profile(log_, feature_map, priors: Priors,
                       grid: Sequence[Hyperparams]) -> list[ProfilePoint]:
    """Marginal log-likelihood at each grid point; failures are recorded as NaN."""
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    stats = SufficientStats.from_design(Design.from_log(log_, feature_map, priors.dim))
    out = []
    for hp in grid:
        try:
            out.append(ProfilePoint(hp, loglik_from_stats(stats, priors, hp)))
        except (np.linalg.LinAlgError, ValueError) as exc:
            out.append(ProfilePoint(hp, float("nan"), str(exc)))
    return out
