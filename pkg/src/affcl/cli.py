"""Command-line entry point.

    affcl run            --config cfg.yaml [--seed S] [--out DIR] [--method NAME]
    affcl sweep-noisy    --config cfg.yaml [--out DIR]
    affcl emit-plots     --dir RUNS [--out DIR]
    affcl validate-config --config cfg.yaml

Exit codes: 0 success, 2 config error, 3 runtime failure. The
AFFCL_DATA_ROOT environment variable sets the base directory for
relative dataset paths.
"""

from __future__ import annotations

import argparse
import json
import sys

from affcl.config import ExperimentConfig
from affcl.errors import ConfigError
from affcl.runner import emit_plot_data, run, sweep_noisy


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affcl")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment over its seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override: single seed")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.add_argument("--method", default=None, help="override training method")

    p_sweep = sub.add_parser("sweep-noisy", help="sweep methods over noisy-client counts")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default=None)

    p_plots = sub.add_parser("emit-plots", help="write plot-ready CSV series")
    p_plots.add_argument("--dir", required=True, help="run or sweep directory")
    p_plots.add_argument("--out", default=None)

    p_val = sub.add_parser("validate-config", help="check a config file and exit")
    p_val.add_argument("--config", required=True)
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config)
    overrides = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if overrides:
        cfg = cfg.replaced(**overrides)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate-config":
            ExperimentConfig.from_yaml(args.config)
            print("config ok")
            return 0
        if args.command == "run":
            summary = run(_load_config(args))
            print(json.dumps(summary, sort_keys=True, indent=2))
            return 0
        if args.command == "sweep-noisy":
            table = sweep_noisy(_load_config(args))
            print(json.dumps(table, sort_keys=True, indent=2))
            return 0
        if args.command == "emit-plots":
            for path in emit_plot_data(args.dir, args.out):
                print(path)
            return 0
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
