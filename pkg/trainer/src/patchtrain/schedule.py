"""Validation-driven learning-rate decay and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class PlateauSchedule:
    """Tracks validation loss across epochs and adjusts the rate.

    An epoch improves when its loss drops more than min_delta below the
    best seen so far.  Every decay_patience epochs without improvement
    multiply the rate by decay; early_stop_patience barren epochs in a
    row mean the run should end.  The first observed loss always counts
    as an improvement.
    """

    initial_lr: float = 5e-4
    decay: float = 0.5
    decay_patience: int = 10
    early_stop_patience: int = 200
    min_delta: float = 1e-5

    lr: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    bad_epochs: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        for name in ("initial_lr", "decay", "decay_patience", "early_stop_patience", "min_delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.lr = self.initial_lr

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True when it improved."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs % self.decay_patience == 0:
            self.lr *= self.decay
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.early_stop_patience
