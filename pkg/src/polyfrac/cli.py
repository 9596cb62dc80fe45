"""Command-line entry point.

``polyfrac run <config>`` executes a simulation; ``polyfrac check
<config>`` validates the configuration (and mesh existence) only. Exit
codes: 0 success, 2 configuration error, 3 input/output error, 4 time
stepping exhausted, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, parse_config
from .runner import STATUS_REFINEMENT_EXHAUSTED, run

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_REFINEMENT = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyfrac",
        description="Ductile transgranular fracture simulation in polycrystals",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a simulation")
    p_run.add_argument("config", help="TOML configuration file")
    p_run.add_argument("--output-dir", default=None, help="override output directory")
    p_run.add_argument("--log-level", default="info",
                       choices=["debug", "info", "warning", "error"])
    p_run.add_argument("--max-steps", type=int, default=None,
                       help="stop after this many accepted steps")
    p_run.add_argument("--resume", default=None, help="checkpoint file to resume from")

    p_check = sub.add_parser("check", help="validate a configuration and exit")
    p_check.add_argument("config")
    p_check.add_argument("--log-level", default="info",
                         choices=["debug", "info", "warning", "error"])
    return parser


def _load_config(path: str):
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    try:
        return parse_config(text)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _load_config(args.config)

    if args.command == "check":
        import os

        if cfg.mesh and not os.path.exists(cfg.mesh):
            print(f"error: mesh file not found: {cfg.mesh}", file=sys.stderr)
            return EXIT_IO
        print("configuration ok")
        return EXIT_OK

    try:
        result = run(
            cfg,
            output_dir=args.output_dir,
            max_steps=args.max_steps,
            resume=args.resume,
        )
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:                      # pragma: no cover - guard rail
        print(f"error: unexpected failure: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED

    print(
        f"status={result.status} steps={result.steps_accepted} "
        f"time={result.time:.6g} frames={result.frames_written} "
        f"output={result.output_dir}"
    )
    if result.status == STATUS_REFINEMENT_EXHAUSTED:
        return EXIT_REFINEMENT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
