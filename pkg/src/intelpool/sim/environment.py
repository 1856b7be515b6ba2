"""mHealth step-count simulator driven by historical data.

States advance in 30-minute steps. Five decision times per day are offered
to each enrolled user; temperature is global and refreshed at decision
times, location is per user and refreshed every step, and step counts are
drawn from historical statistics for the current context. At an available
decision time the reward is the baseline draw plus
``A * (f(S)^T beta_i + Z_i)``.
"""

import collections
from dataclasses import asdict, dataclass, field
from datetime import datetime, time, timedelta

import numpy as np

from ..core_model import FeatureMap
from ..policies import Decision
from . import rng as rngs
from .history import (
    DOW_LEVELS,
    GROUP_LEVELS,
    LOCATION_LEVELS,
    MIN_SAMPLES,
    TEMPERATURE_LEVELS,
    TOD_LEVELS,
    HistoricalDataset,
)

STEP = timedelta(minutes=30)
DEFAULT_SLOTS = ("09:00", "11:30", "14:00", "16:30", "19:00")
# eight-week base profile: ~10% per week with ~30% in week two
DEFAULT_WEEKLY_RATES = (0.1, 0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1)
AVAILABILITY_PROB = 0.8


def time_of_day(t: datetime) -> str:
    hour = t.hour + t.minute / 60.0
    if 5.0 <= hour < 13.0:
        return "early"
    if 13.0 <= hour < 18.0:
        return "late"
    return "night"


def day_of_week(t: datetime) -> str:
    return "weekend" if t.weekday() >= 5 else "weekday"


def _parse_slot(s) -> time:
    if isinstance(s, time):
        return s
    hh, mm = str(s).split(":")
    return time(int(hh), int(mm))


@dataclass(frozen=True)
class SimClock:
    start: datetime
    slots: tuple = DEFAULT_SLOTS

    def __post_init__(self):
        slots = tuple(sorted(_parse_slot(s) for s in self.slots))
        if len(slots) != 5:
            raise ValueError("the simulator uses exactly five decision slots per day")
        if any(s.minute % 30 or s.second for s in slots):
            raise ValueError("decision slots must sit on 30-minute boundaries")
        object.__setattr__(self, "slots", slots)
        if self.start.minute % 30 or self.start.second or self.start.microsecond:
            raise ValueError("clock start must sit on a 30-minute boundary")

    @property
    def step(self) -> timedelta:
        return STEP

    def is_decision_time(self, t: datetime) -> bool:
        return t.time() in self.slots

    def decision_times(self, day: datetime):
        base = day.replace(hour=0, minute=0, second=0, microsecond=0)
        return [base + timedelta(hours=s.hour, minutes=s.minute) for s in self.slots]


@dataclass(frozen=True)
class SimState:
    tod: str
    dow: str
    month: int
    temperature: str
    location: str
    prior_activity: int
    available: bool
    group_id: int

    def __post_init__(self):
        if (self.tod not in TOD_LEVELS or self.dow not in DOW_LEVELS
                or self.temperature not in TEMPERATURE_LEVELS
                or self.location not in LOCATION_LEVELS
                or self.group_id not in GROUP_LEVELS or self.prior_activity not in (0, 1)
                or not 1 <= self.month <= 12):
            raise ValueError(f"state outside its declared domains: {self}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def effect_features(state: SimState) -> np.ndarray:
    """Contexts modulating the simulated treatment effect: late, night, home/work."""
    return np.array([state.tod == "late", state.tod == "night",
                     state.location == "home_work"], dtype=float)


def default_feature_map() -> FeatureMap:
    """Bandit features: eight baseline terms and four treatment-effect terms."""

    def baseline(s: SimState):
        return (1.0, float(s.group_id == 1), float(s.tod == "late"), float(s.tod == "night"),
                float(s.dow == "weekend"), float(s.temperature == "hot"),
                float(s.location == "home_work"), float(s.prior_activity))

    def effect(s: SimState):
        return (1.0, float(s.tod == "late"), float(s.tod == "night"),
                float(s.location == "home_work"))

    names = ["intercept", "high_activity", "late", "night", "weekend", "hot", "home_work",
             "prior_high", "A", "A:late", "A:night", "A:home_work"]
    return FeatureMap(baseline, effect, 8, 4, names)


# ---------------------------------------------------------------------------
# users and heterogeneity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimUserProfile:
    user_id: int
    group_id: int
    beta: tuple
    z: float
    entry_time: datetime
    subgroup: int | None = None

    def __post_init__(self):
        if self.group_id not in GROUP_LEVELS:
            raise ValueError("group_id must be 0 or 1")
        if self.entry_time.time() != time(0, 0):
            raise ValueError("users enter on a day boundary")

    def treatment_effect(self, state: SimState) -> float:
        return float(effect_features(state) @ np.asarray(self.beta) + self.z)


VARIANTS = ("homogeneous", "discrete", "continuous")


@dataclass(frozen=True)
class HeterogeneityScenario:
    """How ``(Z_i, beta_i)`` vary across users.

    Effect vectors are ``(Z, beta_late, beta_night, beta_home_work)``.
    ``discrete`` splits users evenly (at random) between ``effect_a`` and
    ``effect_b``; ``continuous`` draws from a Gaussian centered between
    them with per-coordinate ``continuous_sd``; ``homogeneous`` gives
    everybody ``homogeneous_effect``.
    """

    variant: str = "discrete"
    effect_a: tuple = (60.0, 30.0, -60.0, 40.0)
    effect_b: tuple = (-60.0, 30.0, -60.0, 40.0)
    homogeneous_effect: tuple = (0.0, 30.0, -60.0, 40.0)
    continuous_sd: tuple = (50.0, 15.0, 15.0, 15.0)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        for v in (self.effect_a, self.effect_b, self.homogeneous_effect, self.continuous_sd):
            if len(v) != 4:
                raise ValueError("effect vectors have four entries (Z, late, night, home_work)")

    def draw(self, n_users: int, rng: np.random.Generator):
        """Return ``(effects, subgroups)`` with effects of shape (n_users, 4)."""
        if self.variant == "homogeneous":
            return np.tile(self.homogeneous_effect, (n_users, 1)).astype(float), [None] * n_users
        if self.variant == "discrete":
            labels = np.arange(n_users) % 2
            labels = rng.permutation(labels)
            table = np.array([self.effect_a, self.effect_b], dtype=float)
            return table[labels], [int(v) for v in labels]
        center = 0.5 * (np.asarray(self.effect_a) + np.asarray(self.effect_b))
        draws = center + np.asarray(self.continuous_sd) * rng.standard_normal((n_users, 4))
        return draws, [None] * n_users


# ---------------------------------------------------------------------------
# state generation from history
# ---------------------------------------------------------------------------


def _categorical(samples, levels, u):
    samples = np.asarray(samples)
    probs = np.array([np.mean(samples == k) for k in levels])
    return levels[int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(levels) - 1))]


def get_temperature(t: datetime, history: HistoricalDataset, prev_temp=None,
                    rng: np.random.Generator | None = None, u: float | None = None) -> str:
    """Draw the shared temperature from the empirical frequencies in ``history``.

    The very first draw (``prev_temp is None``) conditions on time of day,
    day of week and month only; later draws add the previous temperature.
    """
    if u is None:
        u = (rng if rng is not None else np.random.default_rng()).random()
    query = {"tod": time_of_day(t), "dow": day_of_week(t), "month": t.month}
    if prev_temp is not None:
        query["prev_temperature"] = prev_temp
    _, samples = history.resolve("temperature", query, min_samples=None)
    return _categorical(samples, TEMPERATURE_LEVELS, u)


def get_location(t: datetime, group_id: int, history: HistoricalDataset, prev_loc=None,
                 rng: np.random.Generator | None = None, u: float | None = None) -> str:
    """Draw one user's next location; conditions on group and previous location."""
    if u is None:
        u = (rng if rng is not None else np.random.default_rng()).random()
    query = {"tod": time_of_day(t), "dow": day_of_week(t), "group": group_id}
    if prev_loc is not None:
        query["prev_location"] = prev_loc
    _, samples = history.resolve("location", query, min_samples=None)
    return _categorical(samples, LOCATION_LEVELS, u)


def step_statistics(t: datetime, group_id: int, temperature: str, location: str,
                    prior_activity: int, history: HistoricalDataset, action: int = 0,
                    min_samples: int = MIN_SAMPLES):
    """Mean and population variance of matching historical step counts."""
    query = {"group": group_id, "temperature": temperature, "tod": time_of_day(t),
             "dow": day_of_week(t), "yst": prior_activity, "location": location,
             "action": action}
    _, samples = history.resolve("steps", query, min_samples=min_samples)
    samples = np.asarray(samples, dtype=float)
    mu = float(samples.mean())
    return mu, float(np.mean((samples - mu) ** 2))


def reward_from_noise(stats, z: float, action: int, effect: float) -> float:
    mu, sigma2 = stats
    return mu + np.sqrt(sigma2) * z + action * effect


def generate_reward(state: SimState, action: int, profile: SimUserProfile, stats,
                    rng: np.random.Generator) -> float:
    """Baseline ``N(mu, sigma2)`` draw plus the treatment effect when treated."""
    if stats[1] < 0:
        raise ValueError("variance must be nonnegative")
    z = rng.standard_normal()
    treated = action if state.available else 0
    return reward_from_noise(stats, z, treated, profile.treatment_effect(state))


def sample_availability(rng: np.random.Generator, prob: float = AVAILABILITY_PROB) -> bool:
    return bool(rng.random() < prob)


# ---------------------------------------------------------------------------
# recruitment
# ---------------------------------------------------------------------------


def scaled_weekly_rates(study_weeks: int, base_weekly_rates=DEFAULT_WEEKLY_RATES) -> np.ndarray:
    """Weekly recruitment shares for a study of ``study_weeks`` weeks.

    Shorter studies keep the first ``study_weeks`` base weeks; longer ones
    resample the base profile over the longer horizon. Either way the
    result is renormalized to sum to one.
    """
    base = np.asarray(base_weekly_rates, dtype=float)
    if study_weeks < 1 or base.size == 0 or np.any(base < 0) or base.sum() <= 0:
        raise ValueError("need at least one week and nonnegative rates")
    if study_weeks <= base.size:
        rates = base[:study_weeks]
    else:
        edges = np.linspace(0, base.size, study_weeks + 1)
        cum = np.concatenate([[0.0], np.cumsum(base)])
        rates = np.diff(np.interp(edges, np.arange(base.size + 1), cum))
    if rates.sum() <= 0:
        raise ValueError("recruitment rates vanish over the study horizon")
    return rates / rates.sum()


def cohort_sizes(n_users: int, study_weeks: int, base_weekly_rates=DEFAULT_WEEKLY_RATES):
    """Largest-remainder apportionment of users to weeks."""
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    quotas = n_users * scaled_weekly_rates(study_weeks, base_weekly_rates)
    sizes = np.floor(quotas).astype(int)
    remainder = quotas - sizes
    order = sorted(range(study_weeks), key=lambda w: (-remainder[w], w))
    for w in order[: n_users - sizes.sum()]:
        sizes[w] += 1
    return sizes.tolist()


def recruit_schedule(n_users: int, study_weeks: int, base_weekly_rates=DEFAULT_WEEKLY_RATES,
                     start: datetime | None = None):
    """Entry timestamps (week starts), one per user, in nondecreasing order."""
    start = start or datetime(2019, 4, 1)
    start = start.replace(hour=0, minute=0, second=0, microsecond=0)
    out = []
    for week, size in enumerate(cohort_sizes(n_users, study_weeks, base_weekly_rates)):
        out.extend([start + timedelta(weeks=week)] * size)
    return out


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    start: datetime = datetime(2019, 4, 1)
    n_users: int = 10
    study_weeks: int = 6
    slots: tuple = DEFAULT_SLOTS
    availability_prob: float = AVAILABILITY_PROB
    weekly_rates: tuple = DEFAULT_WEEKLY_RATES
    spread_entry_within_week: bool = True
    high_activity_fraction: float = 0.5
    min_samples: int = MIN_SAMPLES
    scenario: HeterogeneityScenario = field(default_factory=HeterogeneityScenario)

    def __post_init__(self):
        if self.n_users < 1 or self.study_weeks < 1:
            raise ValueError("need at least one user and one week")
        if not 0.0 <= self.availability_prob <= 1.0:
            raise ValueError("availability_prob must be a probability")

    @property
    def end(self) -> datetime:
        return self.start + timedelta(weeks=self.study_weeks)

    def to_dict(self):
        d = asdict(self)
        d["start"] = self.start.isoformat()
        d["slots"] = [str(s) for s in self.slots]
        return d


@dataclass
class _UserState:
    profile: SimUserProfile
    location: str | None = None
    k: int = 0
    day: object = None
    day_total: float | None = None
    daily_totals: list = field(default_factory=list)
    yst: int = 0


@dataclass
class _Pending:
    decision: Decision
    stats: tuple
    z: float


class MHealthSimulator:
    """Stepping environment; see :func:`intelpool.policies.run_trial`.

    All randomness comes from named substreams of ``seed``. The draws made at
    each step do not depend on the actions taken, so two policies run on the
    same seed see the same temperatures, locations, availabilities and noise.
    """

    def __init__(self, config: EnvConfig, history: HistoricalDataset, seed: int = 0,
                 feature_map=None):
        self.config = config
        self.history = history
        self.seed = int(seed)
        self.clock = SimClock(config.start.replace(hour=0, minute=0, second=0, microsecond=0),
                              config.slots)
        self.feature_map = feature_map if feature_map is not None else default_feature_map()
        self._rng = rngs.streams(self.seed)
        self.profiles = self._make_profiles()
        self._users = [_UserState(p) for p in self.profiles]
        self._t = self.clock.start
        self._end = self.clock.start + timedelta(weeks=config.study_weeks)
        self.temperature: str | None = None
        self.temperature_log: list[tuple[datetime, str]] = []
        self._queue: collections.deque[_Pending] = collections.deque()

    def _make_profiles(self):
        cfg = self.config
        entries = recruit_schedule(cfg.n_users, cfg.study_weeks, cfg.weekly_rates, self.clock.start)
        rec = self._rng["recruitment"]
        if cfg.spread_entry_within_week:
            entries = sorted(e + timedelta(days=int(rec.integers(0, 7))) for e in entries)
        prof = self._rng["profiles"]
        groups = (prof.random(cfg.n_users) < cfg.high_activity_fraction).astype(int)
        effects, subgroups = cfg.scenario.draw(cfg.n_users, prof)
        return [SimUserProfile(i, int(groups[i]), tuple(float(b) for b in effects[i, 1:]),
                               float(effects[i, 0]), entries[i], subgroups[i])
                for i in range(cfg.n_users)]

    @property
    def signature(self) -> dict:
        return {"seed": self.seed, "n_users": self.config.n_users,
                "study_weeks": self.config.study_weeks,
                "scenario": self.config.scenario.variant,
                "start": self.clock.start.isoformat()}

    @property
    def end(self) -> datetime:
        return self._end

    def treatment_effect(self, user_id: int, state: SimState) -> float:
        return self.profiles[user_id].treatment_effect(state)

    # -- stepping -------------------------------------------------------------

    def _roll_day(self, user: _UserState, t: datetime):
        today = t.date()
        if user.day == today:
            return
        if user.day_total is not None:
            user.daily_totals.append(user.day_total)
            user.yst = int(user.day_total > float(np.median(user.daily_totals)))
        user.day = today
        user.day_total = 0.0

    def _step(self):
        t = self._t
        cfg = self.config
        at_decision = self.clock.is_decision_time(t)
        if self.temperature is None or at_decision:
            u = self._rng["temperature"].random()
            self.temperature = get_temperature(t, self.history, self.temperature, u=u)
            self.temperature_log.append((t, self.temperature))
        for user in self._users:
            prof = user.profile
            if not prof.entry_time <= t < self._end:
                continue
            self._roll_day(user, t)
            u_loc = self._rng["location"].random()
            user.location = get_location(t, prof.group_id, self.history, user.location, u=u_loc)
            z = float(self._rng["rewards"].standard_normal())
            stats = step_statistics(t, prof.group_id, self.temperature, user.location, user.yst,
                                    self.history, 0, cfg.min_samples)
            if at_decision:
                available = sample_availability(self._rng["availability"], cfg.availability_prob)
                user.k += 1
                state = SimState(time_of_day(t), day_of_week(t), t.month, self.temperature,
                                 user.location, user.yst, available, prof.group_id)
                self._queue.append(_Pending(Decision(prof.user_id, user.k, t, state, available),
                                            stats, z))
            else:
                user.day_total += reward_from_noise(stats, z, 0, 0.0)
        self._t = t + STEP

    def next_decision(self) -> Decision | None:
        """The next pending decision, advancing the clock as needed."""
        while not self._queue:
            if self._t >= self._end:
                return None
            self._step()
        return self._queue[0].decision

    def submit(self, action: int) -> float:
        """Resolve the pending decision with ``action`` and return its reward."""
        if not self._queue:
            raise RuntimeError("no pending decision")
        pending = self._queue.popleft()
        d = pending.decision
        action = int(action) if d.available else 0
        effect = self.profiles[d.user_id].treatment_effect(d.state)
        reward = float(reward_from_noise(pending.stats, pending.z, action, effect))
        self._users[d.user_id].day_total += reward
        return reward
