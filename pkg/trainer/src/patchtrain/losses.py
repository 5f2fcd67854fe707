"""Soft Dice losses, per class and with per-level supervision."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .model import NetworkOutput

EPS = 1e-6


def dice_scores(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-class soft Dice between (batch, c, h, w) tensors.

    Sums run over batch and space jointly, so the result is one score
    per class: (2 * sum(pred * gt) + eps) / (sum(pred) + sum(gt) + eps).
    A class absent from both sides scores 1.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.ndim != 4:
        raise ValueError(f"expected (batch, c, h, w) tensors, got ndim {pred.ndim}")
    inter = (pred * gt).sum(dim=(0, 2, 3))
    denom = pred.sum(dim=(0, 2, 3)) + gt.sum(dim=(0, 2, 3))
    return (2.0 * inter + eps) / (denom + eps)


def dice_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    include_background: bool = True,
    eps: float = EPS,
) -> torch.Tensor:
    """1 minus the mean per-class Dice; background is plane 0."""
    scores = dice_scores(pred, gt, eps)
    if not include_background:
        scores = scores[1:]
    return 1.0 - scores.mean()


def supervision_loss(
    out: NetworkOutput,
    onehot: torch.Tensor,
    weights: tuple[float, ...] | None = None,
    include_background: bool = True,
) -> torch.Tensor:
    """Weighted Dice over the final map and every auxiliary map.

    Targets for the coarser maps are the one-hot planes downsampled with
    nearest neighbor, which keeps them one-hot.  Equal weights unless a
    tuple of len(aux) + 1 entries is given; the total is normalized by
    the weight sum.
    """
    maps = (out.final, *out.aux)
    if weights is None:
        weights = (1.0,) * len(maps)
    if len(weights) != len(maps):
        raise ValueError(
            f"need one weight per trained map: {len(weights)} weights for {len(maps)} maps"
        )
    if min(weights) < 0 or sum(weights) <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    total = None
    for w, m in zip(weights, maps):
        target = onehot
        if m.shape[2:] != onehot.shape[2:]:
            target = F.interpolate(onehot, size=m.shape[2:], mode="nearest")
        term = w * dice_loss(m, target, include_background)
        total = term if total is None else total + term
    return total / sum(weights)
