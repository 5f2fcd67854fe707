"""Training loop over a patch store: balanced batches, plateau decay,
early stopping, and a best-so-far checkpoint plus per-epoch history."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from restain import ConfigError, PatchRecord, balanced_sampler, read_patch_store
from restain.dataset import SET_TAGS

from .errors import TrainerError
from .losses import supervision_loss
from .model import AguNet, NetworkConfig
from .schedule import PlateauSchedule

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "improved")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    An epoch is train_batches weight updates followed by val_batches
    validation batches; the validation batches are drawn once up front
    and reused every epoch so the loss is comparable across epochs.
    """

    initial_lr: float = 5e-4
    lr_decay: float = 0.5
    decay_patience: int = 10
    max_epochs: int = 500
    early_stop_patience: int = 200
    train_batches: int = 160
    val_batches: int = 40
    batch_size: int = 4
    improvement_delta: float = 1e-5
    include_background: bool = True
    aux_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        for name in (
            "initial_lr", "lr_decay", "decay_patience", "max_epochs",
            "early_stop_patience", "train_batches", "val_batches",
            "batch_size", "improvement_delta",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Path
    history: Path
    epochs: int
    updates: int
    best_val_loss: float
    stopped_early: bool


def load_sets(store: str | Path) -> dict[str, list[PatchRecord]]:
    """Read a patch store and bucket its records by set tag."""
    sets: dict[str, list[PatchRecord]] = {tag: [] for tag in SET_TAGS}
    for rec in read_patch_store(store):
        sets[rec.set_tag].append(rec)
    return sets


def batch_tensors(records: list[PatchRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack records into (batch, 3, h, w) inputs scaled to [0, 1] and
    matching one-hot targets."""
    x = np.stack([r.he.data for r in records]).astype(np.float32) / 255.0
    y = np.stack([r.onehot() for r in records]).astype(np.float32)
    return (
        torch.from_numpy(x).permute(0, 3, 1, 2),
        torch.from_numpy(y).permute(0, 3, 1, 2),
    )


def save_checkpoint(model: AguNet, path: str | Path, epoch: int, val_loss: float) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "network": dataclasses.asdict(model.cfg),
            "epoch": epoch,
            "val_loss": val_loss,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> AguNet:
    """Rebuild the network recorded in a checkpoint, in eval mode."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise TrainerError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload or "network" not in payload:
        raise TrainerError(f"checkpoint {path} is missing its weights or network layout")
    net = dict(payload["network"])
    net["filters"] = tuple(net.get("filters", ()))
    try:
        model = AguNet(NetworkConfig(**net))
        model.load_state_dict(payload["state_dict"])
    except (TypeError, ValueError, RuntimeError) as exc:
        raise TrainerError(f"checkpoint {path} does not match its declared layout: {exc}") from exc
    model.eval()
    return model


def _draw(stream: Iterator[PatchRecord], n: int) -> list[PatchRecord]:
    return [next(stream) for _ in range(n)]


def train(
    model: AguNet,
    store: str | Path | dict[str, list[PatchRecord]],
    tc: TrainConfig,
    seed: int,
    out_dir: str | Path,
) -> TrainResult:
    """Fit the model over balanced batches from the store.

    Writes checkpoint.pt (best validation loss so far) and history.csv
    under out_dir and returns where they landed.  Deterministic for a
    fixed seed at a fixed torch thread count.
    """
    sets = store if isinstance(store, dict) else load_sets(store)
    for tag in SET_TAGS:
        if tag not in sets:
            raise ConfigError(f"patch sets are missing the {tag!r} set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    train_stream = balanced_sampler(sets, seed)
    # a fixed validation draw keeps the plateau signal comparable
    val_stream = balanced_sampler(sets, seed + 1)
    val_batches = [_draw(val_stream, tc.batch_size) for _ in range(tc.val_batches)]

    opt = torch.optim.Adam(model.parameters(), lr=tc.initial_lr)
    sched = PlateauSchedule(
        initial_lr=tc.initial_lr,
        decay=tc.lr_decay,
        decay_patience=tc.decay_patience,
        early_stop_patience=tc.early_stop_patience,
        min_delta=tc.improvement_delta,
    )
    checkpoint = out_dir / "checkpoint.pt"
    history = out_dir / "history.csv"
    rows = []
    updates = 0
    stopped_early = False
    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        train_losses = []
        for _ in range(tc.train_batches):
            x, y = batch_tensors(_draw(train_stream, tc.batch_size))
            loss = supervision_loss(model(x), y, tc.aux_weights, tc.include_background)
            opt.zero_grad()
            loss.backward()
            opt.step()
            updates += 1
            train_losses.append(float(loss.detach()))
        model.eval()
        val_losses = []
        with torch.no_grad():
            for recs in val_batches:
                x, y = batch_tensors(recs)
                val_losses.append(
                    float(supervision_loss(model(x), y, tc.aux_weights, tc.include_background))
                )
        val_loss = float(np.mean(val_losses))
        improved = sched.step(val_loss)
        for group in opt.param_groups:
            group["lr"] = sched.lr
        rows.append(
            {
                "epoch": epoch,
                "train_loss": f"{np.mean(train_losses):.6f}",
                "val_loss": f"{val_loss:.6f}",
                "lr": f"{sched.lr:.10g}",
                "improved": int(improved),
            }
        )
        if improved:
            save_checkpoint(model, checkpoint, epoch, val_loss)
        if sched.should_stop:
            stopped_early = True
            break
    with history.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return TrainResult(
        checkpoint=checkpoint,
        history=history,
        epochs=len(rows),
        updates=updates,
        best_val_loss=sched.best,
        stopped_early=stopped_early,
    )
