"""Experiment runner: load a config, apply overrides, train, print metrics.

Exit codes: 0 success, 2 usage error, 3 config error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import baselines
from .config import Config, ConfigError, load_config, override
from .train import run_trainer

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskml",
        description="Run a training experiment from a JSON config file.")
    parser.add_argument("command", choices=["run"], help="subcommand")
    parser.add_argument("--config", required=True, help="path to JSON config")
    parser.add_argument("--workdir", required=True, help="output directory")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="config override; repeatable; +key=value creates")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0

    try:
        config = load_config(args.config)
        config = override(config, args.override)
        model_name = config.require("model.name")
        if model_name in baselines.BASELINES:
            _, defaults, kind = baselines.BASELINES[model_name]
            merged = _merge_defaults(defaults, config.to_dict())
            config = Config(merged)
        else:
            kind = config.require("trainer")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        metrics = run_trainer(kind, config, args.workdir, seed=args.seed)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    print(json.dumps(metrics, sort_keys=True))
    return 0


def _merge_defaults(defaults: dict, explicit: dict) -> dict:
    """Deep-merge, explicit values winning over catalog defaults."""
    out = dict(defaults)
    for key, value in explicit.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = value
    return out


def main():  # console entry point
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
