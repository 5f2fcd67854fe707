"""Command-line entry point.

Each subcommand runs one pipeline stage against a shared output
directory. Configuration comes from an optional JSON file plus dotted
--set overrides; --seed, --threads, and --output-dir are shorthands for
the corresponding keys.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import RestainError
from .pipeline import STAGE_ORDER, run

_STAGE_HELP = {
    "synth": "generate a paired synthetic HE/CK slide with truth and annotations",
    "extract-tma": "detect cores on both slides and pair them by position",
    "register": "estimate the CK-to-HE shift for every core pair",
    "build-gt": "threshold the DAB channel and compose class labels per core",
    "build-patches": "cut overlapping patches into the on-disk patch store",
    "infer-stitch": "run tiled inference and stitch core-level predictions",
    "evaluate": "score predictions against ground truth and write reports",
    "qual-summary": "summarize visual 0-5 scores from a JSON scores file",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restain",
        description="HE/CK slide pairs to registered, class-labeled "
        "segmentation datasets, with evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER:
        p = sub.add_parser(name, help=_STAGE_HELP[name])
        p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--threads", type=int, default=None, help="worker thread cap")
        p.add_argument("--output-dir", default=None, help="stage output root")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key by dotted path (repeatable)",
        )
        if name == "evaluate":
            p.add_argument(
                "--overlay",
                action="store_true",
                help="also write palette overlays of predictions on HE crops",
            )
        if name == "qual-summary":
            p.add_argument(
                "--scores", required=True, help="JSON file of per-case 0-5 scores"
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")

    try:
        cfg = load_config(args.config, tuple(overrides))
        run(
            args.command,
            cfg,
            scores=getattr(args, "scores", None),
            overlay=getattr(args, "overlay", False),
        )
    except RestainError as exc:
        print(f"restain {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
