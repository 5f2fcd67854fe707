"""Command line front end: train a model over a store, export a predictor."""

from __future__ import annotations

import argparse
import sys

from restain import RestainError

from .errors import TrainerError
from .export import export_predictor
from .model import NetworkConfig, build_network
from .train import TrainConfig, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchtrain",
        description="train the patch segmentation network and export predictors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit the network over a patch store")
    t.add_argument("--store", required=True, help="patch store directory")
    t.add_argument("--out", required=True, help="directory for checkpoint and history")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--input-size", type=int, default=128)
    t.add_argument("--epochs", type=int, default=None, help="override max epochs")
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--train-batches", type=int, default=None, help="weight updates per epoch")
    t.add_argument("--val-batches", type=int, default=None)

    e = sub.add_parser("export", help="write a predictor executable from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="path of the executable to write")
    return parser


def _train_config(args: argparse.Namespace) -> TrainConfig:
    overrides = {
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "train_batches": args.train_batches,
        "val_batches": args.val_batches,
    }
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            tc = _train_config(args)
            model = build_network(NetworkConfig(input_size=args.input_size), seed=args.seed)
            result = train(model, args.store, tc, args.seed, args.out)
            print(
                f"trained {result.epochs} epochs ({result.updates} updates), "
                f"best val loss {result.best_val_loss:.6f}, "
                f"checkpoint {result.checkpoint}"
            )
        elif args.command == "export":
            path = export_predictor(args.checkpoint, args.out)
            print(f"exported predictor {path}")
    except (TrainerError, RestainError, ValueError) as exc:
        print(f"patchtrain {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
