"""Command line front end.

Subcommands:
  run       train a method over its seeds and write run artifacts
  gen-data  generate a dataset file for reuse across runs
  validate  load a config, check it, and print the resolved values
  report    render figures for a finished run directory

Exit codes: 0 on success, 2 for configuration or usage problems, 1 for
any other failure raised by the library.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import __version__
from .config import (METHODS, ExperimentConfig, config_to_dict, load_config,
                     method_toggles)
from .data import generate, save_dataset
from .errors import ConfigError, FedcvuError, UsageError
from .experiment import emit_outputs, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcvu",
        description="federated simulation across heterogeneous sensing views")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one method and write artifacts")
    p_run.add_argument("--config", help="JSON config file (defaults apply if omitted)")
    p_run.add_argument("--method", choices=sorted(METHODS),
                       help="override the configured method")
    p_run.add_argument("--seed", type=int, action="append", dest="seeds",
                       help="override the seed list (repeatable)")
    p_run.add_argument("--rounds", type=int, help="override the round count")
    p_run.add_argument("--data", help="reuse a dataset file instead of generating")
    p_run.add_argument("--out", default="runs/latest", help="output directory")
    p_run.add_argument("--plots", action="store_true",
                       help="also render figures next to the delimited outputs")

    p_gen = sub.add_parser("gen-data", help="generate a dataset file")
    p_gen.add_argument("--config", help="JSON config file (synth section is used)")
    p_gen.add_argument("--seed", type=int, help="override the generator seed")
    p_gen.add_argument("--out", required=True, help="dataset file to write")

    p_val = sub.add_parser("validate", help="check a config and echo it")
    p_val.add_argument("--config", help="JSON config file")

    p_rep = sub.add_parser("report", help="render figures for a run directory")
    p_rep.add_argument("run_dir", help="directory holding metrics.csv / sync_trace.csv")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(args.seeds)
    if getattr(args, "rounds", None):
        overrides["rounds"] = args.rounds
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    artifacts = run_experiment(cfg, data_file=args.data)
    paths = emit_outputs(artifacts, args.out)
    if args.plots:
        from .plots import render_all
        for p in render_all(args.out):
            paths[p] = p
    final = artifacts.summary["mean"]
    print(f"method {cfg.method}: seen {final['final_seen_top1']:.2f} "
          f"unseen {final['final_unseen_top1']:.2f} "
          f"({final['total_gb']:.3f} GB mean traffic)")
    for name in sorted(paths.values()):
        print(f"  wrote {name}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    synth = cfg.synth
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    dataset = generate(synth)
    save_dataset(dataset, args.out)
    n = sum(v.x.shape[0] for v in dataset.views)
    print(f"wrote {args.out}: {len(dataset.views)} views, {n} samples")
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.validate()
    toggles = method_toggles(cfg.method)
    print(json.dumps({"config": config_to_dict(cfg),
                      "toggles": dataclasses.asdict(toggles)},
                     indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from .plots import render_all
    for p in render_all(args.run_dir):
        print(f"  wrote {p}")
    return 0


_COMMANDS = {
    "run": cmd_run,
    "gen-data": cmd_gen_data,
    "validate": cmd_validate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FedcvuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
