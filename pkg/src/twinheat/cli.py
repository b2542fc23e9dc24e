"""Command-line entry point.

One config file drives every subcommand; `--set dotted.key=value` overrides
individual fields without editing it. Exit codes: 0 success, 2 bad config,
3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .pipeline import (
    ConfigError,
    StageError,
    cmd_eval,
    cmd_fit,
    cmd_generate,
    cmd_serve,
    cmd_train,
    load_config,
    run_pipeline,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

_BATCH = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "train": cmd_train,
    "eval": cmd_eval,
}

_HELP = {
    "generate": "roll the plant under its thermostat and export sensor CSVs",
    "fit": "fit thermal and occupancy twins from the exported CSVs",
    "train": "train the heating agent inside the twin-built virtual env",
    "eval": "evaluate the trained agent closed-loop on the plant",
    "serve": "run the registry and bridge HTTP service until interrupted",
    "pipeline": "run generate, fit, train, and eval in order with a manifest",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twinheat",
        description="Digital-twin platform and deep-RL harness for home heating.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in _HELP.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", type=Path, required=True,
                         help="pipeline config JSON (see docs/config.md)")
        cmd.add_argument("--set", action="append", default=[], dest="overrides",
                         metavar="KEY=VALUE",
                         help="override a config field, e.g. --set room=bedroom")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "pipeline":
            manifest = run_pipeline(config)
            for stage, info in manifest["stages"].items():
                print(f"{stage}: {info['status']} ({info['seconds']}s)")
            print(f"manifest: {config.paths.metrics_dir / 'manifest.json'}")
        elif args.command == "serve":
            host, port = config.serve.host, config.serve.port
            print(f"serving on http://{host}:{port} (ctrl-c to stop)")
            cmd_serve(config)
        else:
            artifacts = _BATCH[args.command](config)
            for name, path in artifacts.items():
                print(f"{name}: {path}")
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
