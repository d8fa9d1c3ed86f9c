"""Command-line experiment runner.

Subcommands: estimate, attack, solver-compare, blackbox, train.  Every run
is a pure function of its config file and seed; --smoke shrinks campaigns
to CI size (5 samples per attack, 100 optimizer steps).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import jobs
from .config import ConfigError, load_config

_COMMANDS = {
    "estimate": jobs.run_estimate,
    "attack": jobs.run_attack_campaign,
    "solver-compare": jobs.run_solver_compare,
    "blackbox": jobs.run_blackbox,
    "train": jobs.run_train,
}

_CONFIG_KINDS = {
    "estimate": "estimate",
    "attack": "attack",
    "solver-compare": "solver_compare",
    "blackbox": "blackbox",
    "train": "train",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--output-dir", help="overrides the config output_dir")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel jobs")
    parser.add_argument(
        "--smoke", action="store_true", help="CI-sized run: 5 samples, 100 steps"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pflab",
        description="Probability-flow ODE density estimation and attack lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        _add_common(sub.add_parser(name))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        expected = _CONFIG_KINDS[args.command]
        if cfg.kind != expected:
            raise ConfigError(
                f"kind: config is for {cfg.kind!r}, command needs {expected!r}"
            )
        if args.seed is not None:
            cfg.seed = args.seed
        out_dir = cfg.output_dir
        env_dir = os.environ.get("PFLAB_OUTPUT_DIR")
        if env_dir:
            out_dir = env_dir
        if args.output_dir:
            out_dir = args.output_dir
        cfg.workers = max(1, args.workers)
        if args.smoke:
            cfg.apply_smoke()
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except jobs.InvariantViolation as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
