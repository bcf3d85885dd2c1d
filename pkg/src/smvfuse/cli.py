"""Command-line front end.

Subcommands mirror the pipeline stages so partial runs compose:

* ``synth``      write a self-contained synthetic sequence to disk
* ``multiview``  hypothesis search per keyframe
* ``select``     anchor selection from an existing search stage
* ``fuse``       weighted fusion from an existing selection stage
* ``evaluate``   metrics CSV from existing artifacts and truth
* ``ablate``     fuse under each weight variant, one metrics row each
* ``pipeline``   all stages end to end

Exit codes: 0 all requested keyframes succeeded, 2 a referenced file or
directory is missing (the message names it), 1 any other stage failure
(the message names the stage).
"""

from __future__ import annotations

import argparse
import sys

from .config import build_config
from .pipeline import (
    PipelineError,
    generate_synthetic_sequence,
    run_ablation,
    run_evaluate,
    run_fuse,
    run_multiview,
    run_pipeline,
    run_select,
)

_STAGE_COMMANDS = {
    "multiview": run_multiview,
    "select": run_select,
    "fuse": run_fuse,
    "evaluate": run_evaluate,
    "ablate": run_ablation,
    "pipeline": run_pipeline,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smvfuse",
        description="Fuse multi-view and single-view depth over posed sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic sequence to a directory")
    synth.add_argument("--out", required=True, help="sequence directory to create")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--frames", type=int, default=12)
    synth.add_argument("--step", type=float, default=0.03, help="camera step in meters")

    for name in _STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage over all keyframes")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument(
            "--set",
            action="append",
            dest="overrides",
            metavar="KEY=VALUE",
            default=[],
            help="override one config key (repeatable)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            manifest = generate_synthetic_sequence(
                args.out, seed=args.seed, n_frames=args.frames, step=args.step
            )
            print(f"wrote sequence manifest: {manifest}")
            return 0
        config = build_config(args.config, args.overrides)
        return _STAGE_COMMANDS[args.command](config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: [{exc.stage}] {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
