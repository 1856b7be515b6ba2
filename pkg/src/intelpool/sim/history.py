"""Context-keyed historical data store and nearest-match lookup.

A record belongs to one target table (``"temperature"``, ``"location"`` or
``"steps"``), carries a context mapping and a target value. Queries match on
the fields they name and ignore the rest of a record's context.
"""

import itertools
import json
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

MIN_SAMPLES = 30

TOD_LEVELS = ("early", "late", "night")
DOW_LEVELS = ("weekday", "weekend")
TEMPERATURE_LEVELS = ("cold", "hot")
LOCATION_LEVELS = ("other", "home_work")
GROUP_LEVELS = (0, 1)
BINARY_LEVELS = (0, 1)
MONTHS = tuple(range(1, 13))

TEMPERATURE_FIELDS = ("tod", "dow", "month", "prev_temperature")
LOCATION_FIELDS = ("tod", "dow", "group", "prev_location")
STEP_FIELDS = ("group", "temperature", "tod", "dow", "yst", "location", "action")

DOMAINS = {
    "tod": TOD_LEVELS,
    "dow": DOW_LEVELS,
    "month": MONTHS,
    "temperature": TEMPERATURE_LEVELS,
    "prev_temperature": TEMPERATURE_LEVELS,
    "location": LOCATION_LEVELS,
    "prev_location": LOCATION_LEVELS,
    "group": GROUP_LEVELS,
    "yst": BINARY_LEVELS,
    "action": BINARY_LEVELS,
}


class SparseHistoryError(LookupError):
    """No sub-state of the query has enough historical samples."""


@dataclass(frozen=True)
class HistoryRecord:
    table: str
    context: Mapping[str, Any]
    value: Any

    def to_json(self):
        return {"table": self.table, "context": dict(self.context), "value": self.value}


def state_functions(history, query: Mapping[str, Any], target: str) -> list:
    """Every ``target`` value whose record context agrees with ``query``.

    Linear scan in record order; the query's fields must all be present in a
    record's context for it to match.
    """
    records = history.records if isinstance(history, HistoricalDataset) else history
    out = []
    for rec in records:
        if rec.table != target:
            continue
        ctx = rec.context
        if all(f in ctx and ctx[f] == v for f, v in query.items()):
            out.append(rec.value)
    return out


class SubState(NamedTuple):
    """A projection of a state onto a subset of its positions."""

    positions: tuple[int, ...]
    values: tuple
    n_samples: int


def _substate_counts(table: Mapping[tuple, Sequence], positions):
    counts: dict[tuple, int] = {}
    for key, samples in table.items():
        sub = tuple(key[j] for j in positions)
        counts[sub] = counts.get(sub, 0) + len(samples)
    return counts


def find_match(target_state: Sequence, table: Mapping[tuple, Sequence],
               min_samples: int = MIN_SAMPLES) -> SubState:
    """Closest state to ``target_state`` with more than ``min_samples`` samples.

    The full state is used when it has enough samples. Otherwise sub-states
    of size d-1, d-2, ... are formed by dropping positions; at each size the
    sub-state (of the target) with the most samples is taken, and the first
    one exceeding ``min_samples`` is returned. Equal counts resolve to the
    earlier position combination.
    """
    target = tuple(target_state)
    d = len(target)
    if not table:
        raise SparseHistoryError("empty table")
    if target in table and len(table[target]) > min_samples:
        return SubState(tuple(range(d)), target, len(table[target]))
    for size in range(d - 1, -1, -1):
        best: SubState | None = None
        for positions in itertools.combinations(range(d), size):
            counts = _substate_counts(table, positions)
            values = tuple(target[j] for j in positions)
            n = counts.get(values, 0)
            if best is None or n > best.n_samples:
                best = SubState(positions, values, n)
        if best is not None and best.n_samples > min_samples:
            return best
    raise SparseHistoryError(f"no sub-state of {target} has more than {min_samples} samples")


def substate_samples(table: Mapping[tuple, Sequence], match: SubState) -> list:
    out = []
    for key, samples in table.items():
        if all(key[j] == v for j, v in zip(match.positions, match.values)):
            out.extend(samples)
    return out


class HistoricalDataset:
    """Records plus lazily built per-(table, fields) indexes."""

    def __init__(self, records: Iterable[HistoryRecord]):
        self.records = list(records)
        self._tables: dict[tuple, dict[tuple, list]] = {}
        self._resolved: dict[tuple, tuple[SubState, np.ndarray]] = {}
        for rec in self.records:
            if rec.table == "steps" and rec.value < 0:
                raise ValueError("step counts must be nonnegative")

    def __len__(self):
        return len(self.records)

    def table(self, target: str, fields: Sequence[str]) -> dict[tuple, list]:
        """Map from the ``fields`` projection of each record to its values."""
        fields = tuple(fields)
        key = (target, fields)
        if key not in self._tables:
            index: dict[tuple, list] = {}
            for rec in self.records:
                if rec.table != target:
                    continue
                ctx = rec.context
                if all(f in ctx for f in fields):
                    index.setdefault(tuple(ctx[f] for f in fields), []).append(rec.value)
            self._tables[key] = index
        return self._tables[key]

    def samples(self, target: str, query: Mapping[str, Any]) -> list:
        fields = tuple(query)
        return list(self.table(target, fields).get(tuple(query.values()), []))

    def resolve(self, target: str, query: Mapping[str, Any], min_samples: int | None = MIN_SAMPLES):
        """Samples for ``query``, falling back to the nearest match.

        With ``min_samples=None`` the exact match is used whenever it is
        nonempty and the nearest-match search only runs for empty matches.
        """
        fields = tuple(query)
        values = tuple(query.values())
        cache_key = (target, fields, values, min_samples)
        hit = self._resolved.get(cache_key)
        if hit is not None:
            return hit
        table = self.table(target, fields)
        exact = table.get(values, [])
        if min_samples is None and exact:
            result = (SubState(tuple(range(len(fields))), values, len(exact)), np.asarray(exact))
        else:
            threshold = 0 if min_samples is None else min_samples
            match = find_match(values, table, threshold)
            result = (match, np.asarray(substate_samples(table, match)))
        self._resolved[cache_key] = result
        return result

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    records.append(HistoryRecord(d["table"], d["context"], d["value"]))
        return cls(records)


# ---------------------------------------------------------------------------
# synthetic history
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generative settings for the stand-in historical dataset.

    Step counts are 30-minute totals with mean
    ``group_base * tod * dow * temperature * location * yst`` multipliers
    (every reference level has multiplier 1) plus ``treatment_effect`` when
    a message was sent, and standard deviation ``noise_cv * mean``.
    """

    group_base_steps: tuple[float, float] = (120.0, 300.0)
    tod_mult: tuple[float, float, float] = (1.0, 1.15, 0.6)
    weekend_mult: float = 0.85
    hot_mult: float = 0.9
    home_work_mult: float = 0.8
    yst_high_mult: float = 1.25
    noise_cv: float = 0.6
    treatment_effect: float = 30.0
    # temperature: seasonal P(hot) by month, shifted by time of day, then
    # mixed with the previous value by `temperature_persistence`
    hot_peak: float = 0.9
    hot_trough: float = 0.1
    tod_hot_shift: tuple[float, float, float] = (0.0, 0.1, -0.15)
    temperature_persistence: float = 0.7
    home_work_by_tod: tuple[float, float, float] = (0.6, 0.5, 0.85)
    weekend_home_work_shift: float = 0.1
    low_group_home_work_shift: float = 0.05
    location_persistence: float = 0.6
    samples_per_key: tuple[int, int] = (50, 120)

    def __post_init__(self):
        lo, hi = self.samples_per_key
        if lo < 1 or hi < lo:
            raise ValueError("samples_per_key must satisfy 1 <= low <= high")
        if self.noise_cv < 0:
            raise ValueError("noise_cv must be nonnegative")


def _p_hot(cfg: SynthConfig, tod, month, prev):
    season = 0.5 * (1 + np.cos(2 * np.pi * (month - 7) / 12.0))
    p = cfg.hot_trough + (cfg.hot_peak - cfg.hot_trough) * season
    p = float(np.clip(p + cfg.tod_hot_shift[TOD_LEVELS.index(tod)], 0.02, 0.98))
    if prev is None:
        return p
    w = cfg.temperature_persistence
    return w * (1.0 if prev == "hot" else 0.0) + (1 - w) * p


def _p_home_work(cfg: SynthConfig, tod, dow, group, prev):
    p = cfg.home_work_by_tod[TOD_LEVELS.index(tod)]
    if dow == "weekend":
        p += cfg.weekend_home_work_shift
    if group == 0:
        p += cfg.low_group_home_work_shift
    p = float(np.clip(p, 0.02, 0.98))
    if prev is None:
        return p
    w = cfg.location_persistence
    return w * (1.0 if prev == "home_work" else 0.0) + (1 - w) * p


def expected_steps(cfg: SynthConfig, group, temperature, tod, dow, yst, location, action):
    mean = cfg.group_base_steps[group] * cfg.tod_mult[TOD_LEVELS.index(tod)]
    if dow == "weekend":
        mean *= cfg.weekend_mult
    if temperature == "hot":
        mean *= cfg.hot_mult
    if location == "home_work":
        mean *= cfg.home_work_mult
    if yst == 1:
        mean *= cfg.yst_high_mult
    return mean + action * cfg.treatment_effect


def _keys(fields):
    return itertools.product(*(DOMAINS[f] for f in fields))


def synth_historical_dataset(config: SynthConfig = SynthConfig(),
                             rng: np.random.Generator | int | None = 0) -> HistoricalDataset:
    """Draw a synthetic stand-in for the historical trial data.

    Every full context key of each table receives between
    ``samples_per_key[0]`` and ``samples_per_key[1]`` records, so exact-match
    queries always have enough data.
    """
    rng = np.random.default_rng(rng)
    lo, hi = config.samples_per_key
    records = []
    for key in _keys(TEMPERATURE_FIELDS):
        ctx = dict(zip(TEMPERATURE_FIELDS, key))
        p = _p_hot(config, ctx["tod"], ctx["month"], ctx["prev_temperature"])
        n = int(rng.integers(lo, hi + 1))
        for hot in rng.random(n) < p:
            records.append(HistoryRecord("temperature", ctx, "hot" if hot else "cold"))
    for key in _keys(LOCATION_FIELDS):
        ctx = dict(zip(LOCATION_FIELDS, key))
        p = _p_home_work(config, ctx["tod"], ctx["dow"], ctx["group"], ctx["prev_location"])
        n = int(rng.integers(lo, hi + 1))
        for hw in rng.random(n) < p:
            records.append(HistoryRecord("location", ctx, "home_work" if hw else "other"))
    for key in _keys(STEP_FIELDS):
        ctx = dict(zip(STEP_FIELDS, key))
        mean = expected_steps(config, **ctx)
        n = int(rng.integers(lo, hi + 1))
        draws = np.maximum(0.0, np.rint(mean + config.noise_cv * mean * rng.standard_normal(n)))
        for v in draws:
            records.append(HistoryRecord("steps", ctx, float(v)))
    return HistoricalDataset(records)


def synth_daily_steps(n_users: int, n_days: int, group_daily_means=(3000.0, 9000.0),
                      group_daily_sds=(900.0, 2400.0), rng=None, high_fraction=0.5):
    """Per-user daily step totals from two planted activity groups.

    Returns ``(series, groups)`` with ``series`` of shape ``(n_users, n_days)``.
    """
    rng = np.random.default_rng(rng)
    groups = (rng.random(n_users) < high_fraction).astype(int)
    means = np.asarray(group_daily_means)[groups]
    sds = np.asarray(group_daily_sds)[groups]
    user_means = means * rng.lognormal(0.0, 0.1, size=n_users)
    series = user_means[:, None] + sds[:, None] * rng.standard_normal((n_users, n_days))
    return np.maximum(series, 0.0), groups
