"""Command-line entry point.

One subcommand per stage plus ``serve``; the stage may equally be
picked with ``--stage`` for scripted sweeps:

    crossbev synth --config run.json
    crossbev --stage align --config run.json --out /data/run1
    crossbev serve --config run.json

``--seed`` and ``--out`` override the config file.  GOLDBEV_THREADS
caps per-sample parallelism inside stages; ANNOSERVE_ADDR picks the
host:port that ``serve`` binds.
"""

from __future__ import annotations

import argparse
import os
import sys

from .pipeline import STAGES, ConfigError, PipelineError, load_config, run_stage

_COMMANDS = STAGES + ("serve",)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being
    # clobbered by the subparser's default when it is not repeated after
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                        help="JSON config file (defaults apply)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the config seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                        help="override the output root")

    parser = argparse.ArgumentParser(
        prog="crossbev",
        parents=[common],
        description="Deterministic aerial-to-BEV supervision pipeline.",
    )
    parser.add_argument(
        "--stage",
        choices=_COMMANDS,
        help="stage to run (alternative to naming it as a subcommand)",
    )
    sub = parser.add_subparsers(dest="command", metavar="stage")
    helps = {
        "synth": "simulate a drive: frames, point files, event log",
        "align": "match streams, localize the ego marker, crop supervision",
        "rasterize": "bin matched sweeps into BEV feature channels",
        "fuse": "build tri-state pseudo-labels",
        "split": "assign trajectory-segment dataset splits",
        "eval": "score fused labels; per-sample and aggregate tables",
        "report": "render the evaluation tables to markdown",
        "serve": "start the annotation review service",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _serve(config) -> int:
    import uvicorn

    from .annoserve import build_app

    addr = os.environ.get("ANNOSERVE_ADDR", "127.0.0.1:8731")
    host, _, port = addr.rpartition(":")
    host = host or "127.0.0.1"
    uvicorn.run(build_app(config), host=host, port=int(port), log_level="warning")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = getattr(args, "command", None) or getattr(args, "stage", None)
    if stage is None:
        parser.print_help()
        return 2
    try:
        config = load_config(
            getattr(args, "config", None),
            seed=getattr(args, "seed", None),
            out_dir=getattr(args, "out", None),
        )
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if stage == "serve":
        return _serve(config)

    try:
        result = run_stage(stage, config)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    state = "done" if result.fresh else "cached"
    extras = {
        k: v for k, v in result.info.items() if k not in ("stage", "config_hash", "dir")
    }
    print(f"{stage}: {state} -> {result.out_dir}")
    if extras:
        print("  " + ", ".join(f"{k}={v}" for k, v in extras.items()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
