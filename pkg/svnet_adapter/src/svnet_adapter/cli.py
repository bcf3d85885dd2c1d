"""Command line front end for batch depth prediction.

Exit codes: 0 when every frame got a depth map, 2 when an input file is
missing, 1 for model load failures and malformed inputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from .adapter import AdapterConfig, ModelLoadError, predict_batch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapter",
        description="Predict a dense single-view depth map for every frame in a manifest.",
    )
    parser.add_argument("--manifest", type=Path, required=True, help="sequence manifest file")
    parser.add_argument("--out", type=Path, required=True, help="output directory for depth maps")
    parser.add_argument("--model", default="smooth", help="model name (default: smooth)")
    parser.add_argument("--width", type=int, default=320, help="working width (default: 320)")
    parser.add_argument("--height", type=int, default=240, help="working height (default: 240)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = AdapterConfig(
        model=args.model,
        manifest=args.manifest,
        out_dir=args.out,
        width=args.width,
        height=args.height,
    )
    try:
        pairs = predict_batch(config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ModelLoadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(pairs)} depth maps to {config.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
