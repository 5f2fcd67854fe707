"""Tiled inference with mean-overlap stitching, per-core pixel metrics,
row-variant aggregation, grouped reports, and qualitative score summaries.

Metric conventions: background (class 0) is never scored; any metric
whose denominator is zero counts as 1 for that core; aggregation uses
the population standard deviation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .dataset import PatchGridConfig, patch_grid
from .errors import PredictorError
from .raster import LabelMask, N_CLASSES, RasterImage

FOREGROUND_CLASSES = (1, 2, 3)
CLASS_NAMES = {1: "invasive", 2: "benign", 3: "insitu"}
QUAL_CLASSES = ("all", "benign", "insitu", "invasive")


@runtime_checkable
class Predictor(Protocol):
    def predict(self, patch: RasterImage) -> np.ndarray: ...


class ConstantPredictor:
    """Always outputs probability 1 for one class. Plumbing for tests."""

    def __init__(self, class_code: int):
        if not 0 <= class_code < N_CLASSES:
            raise ValueError(f"class_code must be in [0, {N_CLASSES}), got {class_code}")
        self.class_code = class_code

    def predict(self, patch: RasterImage) -> np.ndarray:
        planes = np.zeros((patch.height, patch.width, N_CLASSES), dtype=np.float64)
        planes[:, :, self.class_code] = 1.0
        return planes


class OraclePredictor:
    """Replays the one-hot ground truth of the core being stitched.

    Knows patch positions through predict_at; plain predict is
    unsupported because position cannot be recovered from pixels alone.
    """

    def __init__(self, gt: LabelMask):
        self.gt = gt

    def predict_at(self, patch: RasterImage, x: int, y: int) -> np.ndarray:
        h, w = patch.height, patch.width
        planes = np.zeros((h, w, N_CLASSES), dtype=np.float64)
        planes[:, :, 0] = 1.0
        gh, gw = self.gt.data.shape
        vh = min(h, gh - y)
        vw = min(w, gw - x)
        if vh > 0 and vw > 0:
            window = self.gt.data[y : y + vh, x : x + vw]
            planes[:vh, :vw, :] = np.eye(N_CLASSES, dtype=np.float64)[window]
        return planes


def _call_predictor(p, patch: RasterImage, x: int, y: int) -> np.ndarray:
    if hasattr(p, "predict_at"):
        return p.predict_at(patch, x, y)
    return p.predict(patch)


def stitch_predict(
    core: RasterImage,
    predictor,
    patch_size: int = 1024,
    overlap: float = 0.30,
) -> LabelMask:
    """Average per-pixel probabilities over all covering patches, argmax.

    Ties resolve to the lowest class code. Accumulation is in double
    precision so anchor order cannot change the result.
    """
    grid_cfg = PatchGridConfig(
        patch_size=patch_size, overlap_fraction=overlap, min_tissue_fraction=0.0
    )
    h, w = core.height, core.width
    accum = np.zeros((h, w, N_CLASSES), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.float64)

    for x, y in patch_grid(w, h, grid_cfg):
        vh = min(patch_size, h - y)
        vw = min(patch_size, w - x)
        window = core.data[y : y + vh, x : x + vw]
        if (vh, vw) != (patch_size, patch_size):
            padded = np.full((patch_size, patch_size, 3), 255, dtype=np.uint8)
            padded[:vh, :vw] = window
            window = padded
        patch = RasterImage(np.ascontiguousarray(window), core.mpp)

        planes = np.asarray(_call_predictor(predictor, patch, x, y), dtype=np.float64)
        if planes.shape != (patch_size, patch_size, N_CLASSES):
            raise PredictorError(
                f"predictor returned shape {planes.shape}, "
                f"expected {(patch_size, patch_size, N_CLASSES)}"
            )
        sums = planes.sum(axis=2)
        if not np.all(np.isfinite(planes)) or np.abs(sums - 1.0).max() > 1e-3:
            raise PredictorError("predictor output is not a per-pixel distribution")

        accum[y : y + vh, x : x + vw] += planes[:vh, :vw]
        counts[y : y + vh, x : x + vw] += 1.0

    mean = accum / counts[:, :, None]
    return LabelMask(np.argmax(mean, axis=2).astype(np.uint8), core.mpp)


# --------------------------------------------------------------------------- #
# Pixel metrics
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int

    @property
    def gt_present(self) -> bool:
        return (self.tp + self.fn) > 0

    @property
    def pred_present(self) -> bool:
        return (self.tp + self.fp) > 0


@dataclass(frozen=True)
class CoreMetrics:
    """tp/fp/fn per foreground class for one core."""

    counts: tuple[ClassCounts, ClassCounts, ClassCounts]
    core_id: int = 0
    case_id: str = ""

    def for_class(self, class_code: int) -> ClassCounts:
        if class_code not in FOREGROUND_CLASSES:
            raise ValueError(f"class_code must be in {FOREGROUND_CLASSES}")
        return self.counts[class_code - 1]


def core_metrics(
    gt: LabelMask, pred: LabelMask, core_id: int = 0, case_id: str = ""
) -> CoreMetrics:
    if gt.data.shape != pred.data.shape:
        raise ValueError(f"dimensions differ: {gt.data.shape} vs {pred.data.shape}")
    confusion = np.bincount(
        gt.data.ravel().astype(np.int64) * N_CLASSES + pred.data.ravel(),
        minlength=N_CLASSES * N_CLASSES,
    ).reshape(N_CLASSES, N_CLASSES)
    counts = []
    for c in FOREGROUND_CLASSES:
        tp = int(confusion[c, c])
        fn = int(confusion[c, :].sum() - confusion[c, c])
        fp = int(confusion[:, c].sum() - confusion[c, c])
        counts.append(ClassCounts(tp=tp, fp=fp, fn=fn))
    return CoreMetrics(counts=tuple(counts), core_id=core_id, case_id=case_id)


def score(m: CoreMetrics, class_code: int) -> tuple[float, float, float]:
    """(dice, precision, recall); a zero denominator scores as 1."""
    c = m.for_class(class_code)
    dice_den = 2 * c.tp + c.fp + c.fn
    prec_den = c.tp + c.fp
    rec_den = c.tp + c.fn
    dice = 2.0 * c.tp / dice_den if dice_den else 1.0
    precision = c.tp / prec_den if prec_den else 1.0
    recall = c.tp / rec_den if rec_den else 1.0
    return dice, precision, recall


@dataclass(frozen=True)
class MetricRow:
    class_code: int
    variant: str
    n: int
    dice: tuple[float, float]       # mean, population SD
    precision: tuple[float, float]
    recall: tuple[float, float]


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _included(cores: list[CoreMetrics], class_code: int, variant: str) -> list[CoreMetrics]:
    if variant == "I":
        return list(cores)
    if variant == "II":
        return [
            m for m in cores
            if m.for_class(class_code).gt_present or m.for_class(class_code).pred_present
        ]
    if variant == "III":
        return [m for m in cores if m.for_class(class_code).gt_present]
    raise ValueError(f"variant must be I, II, or III, got {variant!r}")


def aggregate(
    cores: list[CoreMetrics], variant: str, pooled: bool = False
) -> list[MetricRow]:
    """Per-class mean +- SD rows under one inclusion variant.

    Variant I scores every core; II needs the class in ground truth or
    prediction; III needs it in ground truth. Classes with no included
    cores produce no row. pooled=True scores the summed counts instead
    of averaging per-core scores.
    """
    rows = []
    for class_code in FOREGROUND_CLASSES:
        included = _included(cores, class_code, variant)
        if not included:
            continue
        if pooled:
            total = CoreMetrics(
                counts=tuple(
                    ClassCounts(
                        tp=sum(m.for_class(c).tp for m in included),
                        fp=sum(m.for_class(c).fp for m in included),
                        fn=sum(m.for_class(c).fn for m in included),
                    )
                    for c in FOREGROUND_CLASSES
                )
            )
            d, p, r = score(total, class_code)
            rows.append(
                MetricRow(class_code, variant, len(included), (d, 0.0), (p, 0.0), (r, 0.0))
            )
            continue
        triples = [score(m, class_code) for m in included]
        rows.append(
            MetricRow(
                class_code=class_code,
                variant=variant,
                n=len(included),
                dice=_mean_sd([t[0] for t in triples]),
                precision=_mean_sd([t[1] for t in triples]),
                recall=_mean_sd([t[2] for t in triples]),
            )
        )
    return rows


def group_metrics(
    cores: list[CoreMetrics],
    metadata: dict[str, tuple[str, str]],
) -> dict[str, dict[str, MetricRow]]:
    """Variant-I invasive Dice split by subtype and by grade.

    metadata maps case_id to (subtype, grade); cases without metadata
    fall into the "Unknown" group of both partitions.
    """
    out: dict[str, dict[str, MetricRow]] = {"subtype": {}, "grade": {}}
    for axis, pick in (("subtype", 0), ("grade", 1)):
        groups: dict[str, list[CoreMetrics]] = {}
        for m in cores:
            meta = metadata.get(m.case_id)
            key = meta[pick] if meta is not None else "Unknown"
            groups.setdefault(key, []).append(m)
        for key in sorted(groups):
            dices = [score(m, 1)[0] for m in groups[key]]
            mean, sd = _mean_sd(dices)
            out[axis][key] = MetricRow(
                class_code=1,
                variant="I",
                n=len(groups[key]),
                dice=(mean, sd),
                precision=(math.nan, math.nan),
                recall=(math.nan, math.nan),
            )
    return out


# --------------------------------------------------------------------------- #
# Qualitative scores
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class QualScore:
    """Visual 0-5 rating per class for one case; 0 means class absent
    from both image and segmentation."""

    case_id: str
    scores: dict[str, int] = field(default_factory=dict)
    gt_present: dict[str, bool] | None = None

    def __post_init__(self) -> None:
        for name, value in self.scores.items():
            if name not in QUAL_CLASSES:
                raise ValueError(f"unknown qualitative class {name!r}")
            if not 0 <= value <= 5:
                raise ValueError(f"score for {name!r} must be 0..5, got {value}")


@dataclass(frozen=True)
class QualSummaryRow:
    class_name: str
    variant: str  # "all" or "present"
    n: int
    mean: float
    sd: float
    histogram: dict[int, int]  # score -> count over 0..5


def qualitative_summary(scores: list[QualScore]) -> list[QualSummaryRow]:
    """Mean +- SD per class; zeros are excluded from the "all" variant,
    the "present" variant additionally requires the class in ground truth."""
    rows = []
    for name in QUAL_CLASSES:
        graded = [q for q in scores if name in q.scores]
        for variant in ("all", "present"):
            if variant == "all":
                pool = graded
            else:
                pool = [
                    q for q in graded
                    if (q.gt_present or {}).get(name, q.scores[name] > 0)
                ]
            values = [q.scores[name] for q in pool if q.scores[name] > 0]
            histogram = {s: 0 for s in range(6)}
            for q in pool:
                histogram[q.scores[name]] += 1
            if not values:
                rows.append(QualSummaryRow(name, variant, 0, math.nan, math.nan, histogram))
                continue
            mean, sd = _mean_sd([float(v) for v in values])
            rows.append(QualSummaryRow(name, variant, len(values), mean, sd, histogram))
    return rows


# --------------------------------------------------------------------------- #
# Report files
# --------------------------------------------------------------------------- #

def write_core_csv(cores: list[CoreMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["core_id", "case_id", "class", "tp", "fp", "fn", "dice", "precision", "recall"]
        )
        for m in cores:
            for class_code in FOREGROUND_CLASSES:
                c = m.for_class(class_code)
                d, p, r = score(m, class_code)
                writer.writerow(
                    [m.core_id, m.case_id, CLASS_NAMES[class_code],
                     c.tp, c.fp, c.fn, f"{d:.6f}", f"{p:.6f}", f"{r:.6f}"]
                )


def report_dict(cores: list[CoreMetrics], pooled: bool = False) -> dict:
    """All three variants as one JSON-ready structure."""
    report: dict = {"n_cores": len(cores), "variants": {}}
    for variant in ("I", "II", "III"):
        rows = {}
        for row in aggregate(cores, variant, pooled=pooled):
            rows[CLASS_NAMES[row.class_code]] = {
                "n": row.n,
                "dice_mean": row.dice[0],
                "dice_sd": row.dice[1],
                "precision_mean": row.precision[0],
                "precision_sd": row.precision[1],
                "recall_mean": row.recall[0],
                "recall_sd": row.recall[1],
            }
        report["variants"][variant] = rows
    return report


def write_report_json(cores: list[CoreMetrics], path: str | Path, pooled: bool = False) -> None:
    Path(path).write_text(json.dumps(report_dict(cores, pooled=pooled), indent=2, sort_keys=True) + "\n")
