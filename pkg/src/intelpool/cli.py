"""Command line entry point: ``intelpool run|replay|fit|synth``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    ExperimentConfig,
    priors_from_history,
    replay_trace,
    run_experiment,
    summary_table,
)
from .hyperopt import search_hyperparams
from .policies import hyperparams_record, observations_from_records, read_records
from .sim.environment import SimState, default_feature_map
from .sim.history import SynthConfig, synth_historical_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seeds"] = (args.seed,)
    if getattr(args, "policy", None):
        over["policies"] = tuple(args.policy)
    if getattr(args, "scenario", None):
        over["scenario"] = {"variant": args.scenario}
    if getattr(args, "out", None):
        over["out"] = args.out
    if not over:
        return cfg
    d = cfg.to_dict()
    if "scenario" in over:
        d["scenario"] = {**d["scenario"], **over.pop("scenario")}
    d.update({k: list(v) if isinstance(v, tuple) else v for k, v in over.items()})
    return ExperimentConfig.from_dict(d)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    res = run_experiment(cfg, workers=args.workers)
    sys.stdout.write(summary_table(res.summary))
    if res.failures:
        print(f"{len(res.failures)} replicate(s) failed; see {res.out / 'failures.json'}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_replay(args) -> int:
    same = replay_trace(args.trace)
    print("identical" if same else "MISMATCH")
    return EXIT_OK if same else EXIT_RUNTIME


def cmd_fit(args) -> int:
    records = read_records(args.records)
    header = records[0] if records and records[0].get("record") == "header" else {}
    cfg = ExperimentConfig.from_dict(header["config"]) if "config" in header \
        else _load_config(args)
    history = cfg.history()
    fm = default_feature_map()
    priors, init = priors_from_history(history, fm, cfg.priors)
    obs = observations_from_records(records, SimState.from_dict)
    if len(obs) < 2:
        raise ConfigError("record file holds fewer than two observations")
    fit = search_hyperparams(obs, fm, priors, cfg.hyper_config(args.seed or 0), init)
    out = {"loglik": fit.loglik, "initial_loglik": fit.initial_loglik,
           "boundary_hits": fit.boundary_hits, "n": len(obs),
           **hyperparams_record(fit.hyperparams)}
    text = json.dumps(out, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    data = synth_historical_dataset(SynthConfig(), np.random.default_rng(args.seed or 0))
    data.write(args.out)
    print(f"wrote {len(data)} records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intelpool", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", nargs="?", help="YAML or JSON experiment config")
    run.add_argument("--seed", type=int, help="run a single seed instead of the configured ones")
    run.add_argument("--out", help="output directory")
    run.add_argument("--policy", action="append",
                     help="policy to run (repeatable): person_specific, complete, "
                          "intelligent_pooling")
    run.add_argument("--scenario", choices=("homogeneous", "discrete", "continuous"))
    run.add_argument("--workers", type=int, default=None)
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="rerun a trace and compare it byte for byte")
    replay.add_argument("trace")
    replay.set_defaults(func=cmd_replay)

    fit = sub.add_parser("fit", help="fit hyperparameters on a trace record file")
    fit.add_argument("records")
    fit.add_argument("--config", help="config used when the file has no header")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--out")
    fit.set_defaults(func=cmd_fit)

    synth = sub.add_parser("synth", help="write a synthetic historical dataset")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
