"""Replicated policy comparisons on the simulator: configs, regret, result files."""

import concurrent.futures
import dataclasses
import json
import logging
import os
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml

from .core_model import Hyperparams, Priors
from .hyperopt import HyperSearchConfig
from .policies import PolicyKind, TrialTrace, UpdateSchedule, run_trial, write_trace
from .sim import rng as rngs
from .sim.environment import (
    DEFAULT_SLOTS,
    DEFAULT_WEEKLY_RATES,
    EnvConfig,
    HeterogeneityScenario,
    MHealthSimulator,
    SimState,
    default_feature_map,
)
from .sim.history import HistoricalDataset, SynthConfig, synth_historical_dataset

log = logging.getLogger(__name__)

ALL_POLICIES = tuple(k.value for k in PolicyKind)
EXECUTION_KEYS = ("out", "workers")


class ConfigError(ValueError):
    pass


class RegretMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorConfig:
    """Prior and starting hyperparameters.

    The baseline mean comes from least squares on the historical step table;
    treatment-effect means start at zero. ``Sigma_theta`` is diagonal with
    the given standard deviations and ``Sigma_u`` starts diagonal on the
    treatment-effect block with ``init_sigma_u_sd``. ``sigma_eps2`` starts
    at the least-squares residual variance.
    """

    baseline_sd: float = 50.0
    effect_sd: float = 50.0
    init_sigma_u_sd: float = 25.0

    def __post_init__(self):
        if min(self.baseline_sd, self.effect_sd, self.init_sigma_u_sd) <= 0:
            raise ConfigError("prior standard deviations must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    scenario: HeterogeneityScenario = field(default_factory=HeterogeneityScenario)
    policies: tuple = ALL_POLICIES
    n_users: int = 10
    study_weeks: int = 6
    seeds: tuple = tuple(range(20))
    start: str = "2019-04-01"
    refit_every_days: int = 7
    availability_prob: float = 0.8
    weekly_rates: tuple = DEFAULT_WEEKLY_RATES
    slots: tuple = DEFAULT_SLOTS
    priors: PriorConfig = field(default_factory=PriorConfig)
    hyper: dict = field(default_factory=dict)
    history_seed: int = 0
    history_path: str | None = None
    out: str = "results"
    workers: int = 1

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ConfigError("at least one seed is required")
        if len(self.policies) < 1:
            raise ConfigError("at least one policy is required")
        try:
            policies = tuple(PolicyKind.parse(p).value for p in self.policies)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "policies", policies)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.n_users < 1 or self.study_weeks < 1:
            raise ConfigError("n_users and study_weeks must be at least 1")
        if self.refit_every_days < 0 or self.workers < 1:
            raise ConfigError("refit_every_days must be >= 0 and workers >= 1")
        try:
            datetime.fromisoformat(self.start)
            self.hyper_config()
            self.env_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects -----------------------------------------------------

    @property
    def start_time(self) -> datetime:
        return datetime.fromisoformat(self.start)

    def env_config(self) -> EnvConfig:
        return EnvConfig(start=self.start_time, n_users=self.n_users,
                         study_weeks=self.study_weeks, slots=tuple(self.slots),
                         availability_prob=self.availability_prob,
                         weekly_rates=tuple(self.weekly_rates), scenario=self.scenario)

    def hyper_config(self, seed: int = 0) -> HyperSearchConfig:
        kw = dict(self.hyper)
        su = kw.pop("sigma_u_bounds", (1e-6, 1e4))
        se = kw.pop("sigma_eps2_bounds", (1e-6, 1e6))
        kw["seed"] = seed
        return HyperSearchConfig.from_variances(tuple(su), tuple(se), **kw)

    def schedule(self) -> UpdateSchedule:
        return UpdateSchedule.daily(self.start_time, 7 * self.study_weeks,
                                    self.refit_every_days or None)

    def history(self) -> HistoricalDataset:
        if self.history_path:
            return HistoricalDataset.read(self.history_path)
        return synth_historical_dataset(SynthConfig(), np.random.default_rng(self.history_seed))

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("policies", "seeds", "weekly_rates", "slots"):
            d[key] = list(d[key])
        d["scenario"] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in d["scenario"].items()}
        return d

    def result_dict(self) -> dict:
        """Settings that determine the results; output location and pool size excluded."""
        d = self.to_dict()
        for key in EXECUTION_KEYS:
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "scenario" in d:
                sc = d["scenario"]
                sc = {"variant": sc} if isinstance(sc, str) else dict(sc)
                d["scenario"] = HeterogeneityScenario(
                    **{k: tuple(v) if isinstance(v, list) else v for k, v in sc.items()})
            if "priors" in d:
                d["priors"] = PriorConfig(**d["priors"])
            seeds = d.get("seeds")
            if isinstance(seeds, dict):
                d["seeds"] = tuple(range(int(seeds.get("start", 0)),
                                         int(seeds.get("start", 0)) + int(seeds["count"])))
            elif isinstance(seeds, int):
                d["seeds"] = (seeds,)
            for key in ("policies", "seeds", "weekly_rates", "slots"):
                if key in d:
                    d[key] = tuple(d[key]) if not isinstance(d[key], str) else (d[key],)
            if "start" in d:
                d["start"] = d["start"].isoformat() if isinstance(d["start"], datetime) \
                    else str(d["start"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        return cls.from_dict(data or {})


# ---------------------------------------------------------------------------
# priors from history
# ---------------------------------------------------------------------------


def history_design(history: HistoricalDataset, feature_map, month: int = 1):
    """Feature rows and step counts of the historical step table."""
    rows, y = [], []
    for rec in history.records:
        if rec.table != "steps":
            continue
        c = rec.context
        s = SimState(c["tod"], c["dow"], month, c["temperature"], c["location"], int(c["yst"]),
                     True, int(c["group"]))
        rows.append(feature_map(s, int(c["action"])))
        y.append(float(rec.value))
    if not rows:
        raise ValueError("history has no step records")
    return np.asarray(rows, dtype=float), np.asarray(y)


def priors_from_history(history, feature_map, cfg: PriorConfig = PriorConfig()):
    """Return ``(Priors, Hyperparams)`` used to start every policy."""
    x, y = history_design(history, feature_map)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = float(np.var(y - x @ coef))
    mask = np.asarray(feature_map.random_effect_mask, dtype=bool)
    mu = np.where(mask, 0.0, coef)
    sd = np.where(mask, cfg.effect_sd, cfg.baseline_sd)
    priors = Priors(mu, np.diag(sd ** 2))
    hp = Hyperparams.diagonal(mask, np.full(int(mask.sum()), cfg.init_sigma_u_sd ** 2), resid)
    return priors, hp


# ---------------------------------------------------------------------------
# regret
# ---------------------------------------------------------------------------


@dataclass
class RegretSeries:
    times: list
    user_ids: np.ndarray
    per_step: np.ndarray
    cumulative: np.ndarray
    per_user: dict

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative.size else 0.0

    def records(self):
        for t, u, r, c in zip(self.times, self.user_ids, self.per_step, self.cumulative):
            yield {"t": t.isoformat() if isinstance(t, datetime) else t, "user": int(u),
                   "regret": float(r), "cumulative": float(c)}


def regret_from_effects(effects, actions, available) -> np.ndarray:
    """Per-step regret ``max(e, 0) - e * A`` at available times, 0 elsewhere."""
    e = np.asarray(effects, dtype=float)
    a = np.asarray(actions, dtype=float)
    avail = np.asarray(available, dtype=bool)
    return np.where(avail, np.maximum(e, 0.0) - e * a, 0.0)


def compute_regret(trace: TrialTrace, env) -> RegretSeries:
    """Expected regret of the treatment decisions in ``trace`` under ``env``'s truth."""
    sig = trace.meta.get("env_signature")
    if sig != env.signature:
        raise RegretMismatchError(f"trace came from {sig}, not {env.signature}")
    obs = trace.observations
    effects = [env.treatment_effect(o.user_id, o.state) if o.availability else 0.0 for o in obs]
    per_step = regret_from_effects(effects, [o.action for o in obs], [o.availability for o in obs])
    users = np.array([o.user_id for o in obs], dtype=int)
    per_user = {int(u): float(per_step[users == u].sum()) for u in np.unique(users)}
    return RegretSeries([o.calendar_time for o in obs], users, per_step, np.cumsum(per_step),
                        per_user)


# ---------------------------------------------------------------------------
# replicates
# ---------------------------------------------------------------------------


@dataclass
class ReplicateResult:
    policy: str
    seed: int
    trace: TrialTrace
    regret: RegretSeries


def replicate_header(cfg: ExperimentConfig, policy: str, seed: int) -> dict:
    return {"config": cfg.result_dict(), "replicate": {"policy": policy, "seed": int(seed)}}


_HISTORY_CACHE: dict = {}


def _cached_history(cfg: ExperimentConfig):
    key = (cfg.history_path, cfg.history_seed)
    if key not in _HISTORY_CACHE:
        _HISTORY_CACHE[key] = cfg.history()
    return _HISTORY_CACHE[key]


def run_replicate(cfg: ExperimentConfig, policy, seed: int, history=None) -> ReplicateResult:
    """One trial of ``policy`` on the environment seeded by ``seed``."""
    history = history if history is not None else _cached_history(cfg)
    fm = default_feature_map()
    priors, hp = priors_from_history(history, fm, cfg.priors)
    env = MHealthSimulator(cfg.env_config(), history, seed, fm)
    kind = PolicyKind.parse(policy)
    trace = run_trial(env, kind, cfg.schedule(), priors, hp, rngs.stream(seed, "policy"),
                      fm, cfg.hyper_config(seed))
    return ReplicateResult(kind.value, int(seed), trace, compute_regret(trace, env))


def _replicate_file_stem(policy: str, seed: int) -> str:
    return f"{policy}_seed{seed}"


def _write_replicate(res: ReplicateResult, cfg: ExperimentConfig, out: Path):
    stem = _replicate_file_stem(res.policy, res.seed)
    write_trace(res.trace, out / "traces" / f"{stem}.jsonl",
                replicate_header(cfg, res.policy, res.seed))
    with open(out / "regret" / f"{stem}.jsonl", "w") as fh:
        for rec in res.regret.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {"policy": res.policy, "seed": res.seed, "total_regret": res.regret.total,
            "per_user": {str(k): v for k, v in sorted(res.regret.per_user.items())},
            "n_decisions": len(res.trace.observations)}


def _worker(cfg_dict, policy, seed):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return "ok", run_replicate(cfg, policy, seed)
    except Exception:
        return "error", traceback.format_exc()


def summarize(rows) -> dict:
    """Per-policy spread of total regret over replicates."""
    out = {}
    for policy in sorted({r["policy"] for r in rows}):
        totals = np.array([r["total_regret"] for r in rows if r["policy"] == policy])
        out[policy] = {"n": int(totals.size), "mean": float(totals.mean()),
                       "median": float(np.median(totals)),
                       "std": float(totals.std(ddof=1)) if totals.size > 1 else 0.0,
                       "min": float(totals.min()), "max": float(totals.max())}
    return out


def summary_table(summary: dict) -> str:
    lines = [f"{'policy':<22}{'n':>4}{'mean':>12}{'median':>12}{'std':>12}"]
    for policy, s in summary.items():
        lines.append(f"{policy:<22}{s['n']:>4}{s['mean']:>12.1f}{s['median']:>12.1f}"
                     f"{s['std']:>12.1f}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    out: Path
    replicates: list
    summary: dict
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(cfg: ExperimentConfig, out=None, workers: int | None = None) -> ExperimentResult:
    """Run every (policy, seed) replicate and write result files under ``out``.

    Layout: ``traces/<policy>_seed<s>.jsonl``, ``regret/<policy>_seed<s>.jsonl``,
    ``replicates.jsonl``, ``summary.json``, ``summary.txt`` and, when any
    replicate fails, ``failures.json``. Files depend only on the config, so
    repeated runs are byte-identical.
    """
    out = Path(out if out is not None else cfg.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "regret").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.result_dict(), sort_keys=True, indent=1) + "\n")
    jobs = [(p, s) for s in cfg.seeds for p in cfg.policies]
    workers = workers or cfg.workers
    results: dict = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            futs = {pool.submit(_worker, cfg.to_dict(), p, s): (p, s) for p, s in jobs}
            for fut in concurrent.futures.as_completed(futs):
                results[futs[fut]] = fut.result()
    else:
        for p, s in jobs:
            try:
                results[(p, s)] = ("ok", run_replicate(cfg, p, s))
            except Exception:
                results[(p, s)] = ("error", traceback.format_exc())

    rows, failures = [], []
    for p, s in jobs:
        status, payload = results[(p, s)]
        if status == "ok":
            rows.append(_write_replicate(payload, cfg, out))
        else:
            log.error("replicate %s seed %s failed", p, s)
            failures.append({"policy": p, "seed": s, "error": payload})
    with open(out / "replicates.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    summary = summarize(rows) if rows else {}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    (out / "summary.txt").write_text(summary_table(summary))
    manifest = out / "failures.json"
    if failures:
        manifest.write_text(json.dumps(failures, sort_keys=True, indent=1) + "\n")
    elif manifest.exists():
        os.remove(manifest)
    return ExperimentResult(out, rows, summary, failures)


def summary_from_files(out) -> dict:
    """Recompute the summary from the per-replicate regret files alone."""
    rows = []
    for path in sorted(Path(out, "regret").glob("*.jsonl")):
        policy, seed = path.stem.rsplit("_seed", 1)
        total = 0.0
        with open(path) as fh:
            for line in fh:
                total += json.loads(line)["regret"]
        rows.append({"policy": policy, "seed": int(seed), "total_regret": total})
    return summarize(rows)


def replay_trace(path) -> bool:
    """Rerun the replicate described by a trace header; True when bytes match."""
    path = Path(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
    if header.get("record") != "header" or "config" not in header:
        raise ConfigError("trace has no experiment header")
    cfg = ExperimentConfig.from_dict(header["config"])
    rep = header["replicate"]
    res = run_replicate(cfg, rep["policy"], rep["seed"])
    tmp = path.with_suffix(".replay.tmp")
    try:
        write_trace(res.trace, tmp, replicate_header(cfg, res.policy, res.seed))
        return tmp.read_bytes() == path.read_bytes()
    finally:
        if tmp.exists():
            tmp.unlink()

