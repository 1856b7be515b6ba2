"""Thompson Sampling policies and the trial loop.

Three reward models share one engine:

* ``PERSON_SPECIFIC`` -- a separate Bayesian regression per user, prior
  ``N(mu_theta, Sigma_theta)``, fit on that user's tuples only.
* ``COMPLETE`` -- one regression on every tuple (``Sigma_u`` forced to 0).
* ``INTELLIGENT_POOLING`` -- the random-effects posterior, with
  ``(Sigma_u, sigma_eps2)`` refit by empirical Bayes at flagged update times.
"""

import bisect
import dataclasses
import enum
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
from scipy.special import ndtr

from .core_model import (
    Design,
    GaussianPosterior,
    Hyperparams,
    Observation,
    Priors,
    SufficientStats,
    arm_difference,
    posteriors_from_design,
)
from .hyperopt import HyperSearchConfig, search_hyperparams_from_stats

DEGENERATE_VARIANCE = 1e-12


class PolicyKind(str, enum.Enum):
    PERSON_SPECIFIC = "person_specific"
    COMPLETE = "complete"
    INTELLIGENT_POOLING = "intelligent_pooling"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"ps": "person_specific", "personspecific": "person_specific",
                   "ip": "intelligent_pooling", "intelligentpooling": "intelligent_pooling",
                   "pooling": "intelligent_pooling"}
        return cls(aliases.get(key, key))


# ---------------------------------------------------------------------------
# action selection
# ---------------------------------------------------------------------------


def action_probability(post: GaussianPosterior, state, feature_map,
                       clip: tuple[float, float] | None = None) -> float:
    """Probability that a posterior draw prefers treatment in ``state``."""
    d = arm_difference(feature_map, state)
    m = float(d @ post.mean)
    s2 = float(d @ post.cov @ d)
    if s2 <= DEGENERATE_VARIANCE:
        pi = 1.0 if m > 0 else 0.0 if m < 0 else 0.5
    else:
        pi = float(ndtr(m / np.sqrt(s2)))
    if clip is not None:
        pi = min(max(pi, clip[0]), clip[1])
    return pi


def select_action(pi: float, available: bool, rng: np.random.Generator) -> int:
    """Bernoulli(pi) draw, or 0 without drawing when unavailable."""
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"probability out of range: {pi}")
    if not available:
        return 0
    return int(rng.random() < pi)


# ---------------------------------------------------------------------------
# posteriors per policy
# ---------------------------------------------------------------------------


def _zero_random_effect(hp: Hyperparams) -> Hyperparams:
    return hp.with_sigma_u(np.zeros_like(hp.sigma_u))


def policy_posteriors_from_design(kind: PolicyKind, design: Design, priors: Priors,
                                  hp: Hyperparams, user_ids, method="lowrank"):
    """Posterior of each user's parameter under ``kind``.

    ``None`` in ``user_ids`` yields the posterior for a user with no data.
    """
    kind = PolicyKind.parse(kind)
    user_ids = list(user_ids)
    if kind is PolicyKind.INTELLIGENT_POOLING:
        return posteriors_from_design(design, priors, hp, user_ids, method)
    flat = _zero_random_effect(hp)
    if kind is PolicyKind.COMPLETE:
        shared = posteriors_from_design(design, priors, flat, [None], method)[None]
        return {uid: shared for uid in user_ids}
    out = {}
    for uid in user_ids:
        if uid is None:
            own = design.subset(np.zeros(len(design), dtype=bool))
        else:
            own = design.subset(design.users == uid)
        out[uid] = posteriors_from_design(own, priors, flat, [uid], method)[uid]
    return out


def policy_posterior(kind, user_id, log, feature_map, priors, hp, method="lowrank"):
    design = Design.from_log(log, feature_map, priors.dim)
    return policy_posteriors_from_design(kind, design, priors, hp, [user_id], method)[user_id]


# ---------------------------------------------------------------------------
# closed form for two users, one feature
# ---------------------------------------------------------------------------


def closed_form_two_user(gamma, delta, s1, s2, y1, y2):
    """Posterior means of two users' parameters in the 1-D, zero-mean case.

    ``gamma = sigma_theta^2 / (sigma_theta^2 + sigma_u^2)`` and
    ``delta = sigma_eps^2 / sigma_theta^2``; ``s_i`` is the sum of squared
    features and ``y_i`` the feature-weighted reward sum of user ``i``.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if delta <= 0:
        raise ValueError("delta must be positive")
    dg = delta * gamma
    denom = (1.0 - gamma**2) * s1 * s2 + dg * (s1 + s2) + dg**2
    if denom == 0:
        raise ZeroDivisionError("closed-form denominator vanishes")
    mu1 = ((dg + (1.0 - gamma**2) * s2) * y1 + delta * gamma**2 * y2) / denom
    mu2 = ((dg + (1.0 - gamma**2) * s1) * y2 + delta * gamma**2 * y1) / denom
    return mu1, mu2


# ---------------------------------------------------------------------------
# trial loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    user_id: int
    decision_index: int
    time: Any
    state: Any
    available: bool


class Environment(Protocol):
    def next_decision(self) -> Decision | None: ...

    def submit(self, action: int) -> float: ...


@dataclass(frozen=True)
class UpdateSchedule:
    update_times: tuple
    refit_hyperparams: tuple

    def __post_init__(self):
        times = tuple(self.update_times)
        refit = tuple(bool(r) for r in self.refit_hyperparams)
        if len(times) == 0:
            raise ValueError("schedule needs at least one update time")
        if len(refit) != len(times):
            raise ValueError("one refit flag per update time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("update times must be strictly increasing")
        object.__setattr__(self, "update_times", times)
        object.__setattr__(self, "refit_hyperparams", refit)

    @classmethod
    def daily(cls, start: datetime, n_days: int, refit_every: int | None = 7):
        """Midnight updates, refitting every ``refit_every`` days (never day 0)."""
        start = start.replace(hour=0, minute=0, second=0, microsecond=0)
        times = [start + timedelta(days=d) for d in range(n_days + 1)]
        refit = [bool(refit_every) and d > 0 and d % refit_every == 0 for d in range(n_days + 1)]
        return cls(tuple(times), tuple(refit))

    def __iter__(self):
        return iter(zip(self.update_times, self.refit_hyperparams))


@dataclass
class Snapshot:
    time: Any
    posteriors: dict
    fallback: GaussianPosterior
    n_tuples: int

    def get(self, user_id):
        return self.posteriors.get(user_id, self.fallback)


@dataclass
class HyperRecord:
    time: Any
    hyperparams: Hyperparams
    loglik: float
    n_tuples: int
    boundary_hits: list = field(default_factory=list)


@dataclass
class TrialTrace:
    policy: PolicyKind
    observations: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    posterior_snapshots: list = field(default_factory=list)
    hyperparam_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _initial_snapshot(kind, priors, hp):
    if kind is PolicyKind.INTELLIGENT_POOLING:
        prior = GaussianPosterior(priors.mu_theta.copy(), priors.sigma_theta + hp.sigma_u)
    else:
        prior = GaussianPosterior(priors.mu_theta.copy(), priors.sigma_theta.copy())
    return Snapshot(None, {}, prior, 0)


def run_trial(env: Environment, kind, schedule: UpdateSchedule, priors: Priors,
              hp: Hyperparams, rng: np.random.Generator, feature_map=None,
              hyper_cfg: HyperSearchConfig | None = None, include_unavailable: bool = True,
              clip: tuple[float, float] | None = None, keep_snapshots: bool = True,
              method: str = "lowrank") -> TrialTrace:
    """Run one trial with Thompson Sampling under policy ``kind``.

    Posteriors are frozen between update times. At an update time ``T`` the
    data ``{t <= T}`` is used, hyperparameters are refit first when flagged
    (intelligent pooling only, and only once two tuples exist), then every
    user's posterior is recomputed. The update at ``T`` is applied before the
    first decision strictly later than ``T``.
    """
    kind = PolicyKind.parse(kind)
    feature_map = feature_map if feature_map is not None else getattr(env, "feature_map")
    hyper_cfg = hyper_cfg if hyper_cfg is not None else HyperSearchConfig()
    mask = hp.mask if hp.mask is not None else getattr(feature_map, "random_effect_mask", None)
    p = priors.dim

    trace = TrialTrace(kind, meta={"include_unavailable": include_unavailable,
                                   "env_signature": getattr(env, "signature", None)})
    snapshot = _initial_snapshot(kind, priors, hp)
    phi_rows: list[np.ndarray] = []
    user_rows: list[int] = []
    reward_rows: list[float] = []
    times: list[Any] = []
    updates = list(schedule)
    next_update = 0
    n_refits = 0

    def do_update(t_update, refit):
        nonlocal snapshot, hp, n_refits
        n = bisect.bisect_right(times, t_update)
        design = Design.from_arrays(np.array(phi_rows[:n]).reshape(n, p), user_rows[:n],
                                    reward_rows[:n])
        if refit and kind is PolicyKind.INTELLIGENT_POOLING and n >= 2:
            stats = SufficientStats.from_design(design)
            seed = np.random.SeedSequence([hyper_cfg.seed, n_refits])
            fit = search_hyperparams_from_stats(stats, priors, mask, hyper_cfg, init=hp,
                                                rng=np.random.default_rng(seed))
            n_refits += 1
            hp = fit.hyperparams
            trace.hyperparam_history.append(
                HyperRecord(t_update, hp, fit.loglik, n, list(fit.boundary_hits)))
        users = sorted(set(user_rows[:n]))
        posts = policy_posteriors_from_design(kind, design, priors, hp, users + [None], method)
        fallback = posts.pop(None)
        snapshot = Snapshot(t_update, posts, fallback, n)
        if keep_snapshots:
            trace.posterior_snapshots.append(snapshot)

    while True:
        decision = env.next_decision()
        if decision is None:
            break
        while next_update < len(updates) and updates[next_update][0] < decision.time:
            do_update(*updates[next_update])
            next_update += 1
        if decision.available:
            post = snapshot.get(decision.user_id)
            pi = action_probability(post, decision.state, feature_map, clip)
            action = select_action(pi, True, rng)
        else:
            pi = None
            action = 0
        reward = float(env.submit(action))
        obs = Observation(decision.user_id, decision.decision_index, decision.time,
                          decision.state, action, reward, decision.available)
        trace.observations.append(obs)
        trace.probabilities.append(pi)
        if decision.available or include_unavailable:
            phi_rows.append(np.asarray(feature_map(decision.state, action), dtype=float))
            user_rows.append(decision.user_id)
            reward_rows.append(reward)
            times.append(decision.time)
    trace.meta["final_hyperparams"] = hp
    return trace


# ---------------------------------------------------------------------------
# trace records
# ---------------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, enum.Enum):
        return value.value
    if dataclasses.is_dataclass(value):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def hyperparams_record(hp: Hyperparams) -> dict:
    return {"sigma_u": hp.sigma_u.tolist(), "sigma_eps2": hp.sigma_eps2,
            "mask": None if hp.mask is None else hp.mask.tolist()}


def trace_records(trace: TrialTrace, header: dict | None = None) -> Iterable[dict]:
    """Line records: a header, one record per decision, one per refit."""
    yield {"record": "header", "policy": trace.policy.value, **_jsonable(header or {})}
    for obs, pi in zip(trace.observations, trace.probabilities):
        yield {"record": "observation", "user": obs.user_id, "k": obs.decision_index,
               "t": _jsonable(obs.calendar_time), "state": _jsonable(obs.state),
               "A": obs.action, "pi": pi, "R": obs.reward, "available": obs.availability}
    for rec in trace.hyperparam_history:
        yield {"record": "hyperparams", "t": _jsonable(rec.time), "n": rec.n_tuples,
               "loglik": rec.loglik, "boundary_hits": rec.boundary_hits,
               **hyperparams_record(rec.hyperparams)}


def write_trace(trace: TrialTrace, path, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        for rec in trace_records(trace, header):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def observations_from_records(records: Sequence[dict], state_factory=None) -> list[Observation]:
    """Rebuild observations from ``observation`` records of a trace file."""
    out = []
    for rec in records:
        if rec.get("record", "observation") != "observation":
            continue
        state = rec["state"]
        if state_factory is not None:
            state = state_factory(state)
        t = rec["t"]
        if isinstance(t, str):
            try:
                t = datetime.fromisoformat(t)
            except ValueError:
                pass
        out.append(Observation(int(rec["user"]), int(rec["k"]), t, state, int(rec["A"]),
                               float(rec["R"]), bool(rec.get("available", True))))
    return out
