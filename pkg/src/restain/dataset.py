"""Ground-truth composition, overlapping patch extraction with per-patch
re-registration, class-set assignment, seeded augmentation, and the
on-disk patch store.

Class codes follow the shared label scheme: 0 background, 1 invasive,
2 benign, 3 in situ.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .maskops import BinaryMask, TissueConfig, tissue_mask
from .raster import LabelMask, RasterImage, read_label_mask, write_label_mask
from .register import ShiftVector, apply_shift, register_pair

SET_TAGS = ("insitu", "benign", "invasive")


@dataclass(frozen=True)
class GroundTruthConfig:
    insitu_precedence: bool = True


@dataclass(frozen=True)
class PatchGridConfig:
    patch_size: int = 1024
    overlap_fraction: float = 0.25
    min_tissue_fraction: float = 0.25

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ValueError("min_tissue_fraction must be in [0, 1]")


@dataclass(frozen=True)
class PatchOrigin:
    slide: str
    core: int
    x: int
    y: int
    level_factor: int

    def seed_words(self, seed: int) -> list[int]:
        return [
            seed,
            zlib.crc32(self.slide.encode()),
            self.core,
            self.x,
            self.y,
            self.level_factor,
        ]


@dataclass(frozen=True)
class PatchRecord:
    he: RasterImage
    gt: LabelMask
    set_tag: str
    origin: PatchOrigin
    shift_applied: ShiftVector
    tissue_fraction: float

    def __post_init__(self) -> None:
        if self.set_tag not in SET_TAGS:
            raise ValueError(f"set_tag must be one of {SET_TAGS}, got {self.set_tag!r}")

    def onehot(self) -> np.ndarray:
        return self.gt.onehot()


def build_ground_truth(
    dab: BinaryMask,
    benign: BinaryMask,
    insitu: BinaryMask,
    excl: BinaryMask | None = None,
    cfg: GroundTruthConfig = GroundTruthConfig(),
) -> tuple[LabelMask, bool]:
    """Compose the three-class label raster from the cleaned DAB mask.

    DAB-positive pixels inside an in situ polygon become class 3, inside a
    benign polygon class 2, all remaining positives class 1. Exclusion
    areas force class 0; any overlap flags the core for exclusion.
    """
    shapes = {dab.data.shape, benign.data.shape, insitu.data.shape}
    if excl is not None:
        shapes.add(excl.data.shape)
    if len(shapes) != 1:
        raise ValueError(f"mask dimensions differ: {sorted(shapes)}")

    labels = np.zeros(dab.data.shape, dtype=np.uint8)
    if cfg.insitu_precedence:
        labels[dab.data & benign.data] = 2
        labels[dab.data & insitu.data] = 3
    else:
        labels[dab.data & insitu.data] = 3
        labels[dab.data & benign.data] = 2
    labels[dab.data & ~(benign.data | insitu.data)] = 1

    flagged = False
    if excl is not None and excl.data.any():
        labels[excl.data] = 0
        flagged = True
    return LabelMask(labels, dab.mpp), flagged


def _axis_anchors(dim: int, size: int, stride: int) -> list[int]:
    if dim <= size:
        return [0]
    anchors = []
    a = 0
    while a < dim:
        anchors.append(min(a, dim - size))
        a += stride
    out: list[int] = []
    for a in anchors:
        if not out or a != out[-1]:
            out.append(a)
    return out


def patch_grid(width: int, height: int, cfg: PatchGridConfig) -> list[tuple[int, int]]:
    """Anchor positions for an overlapping patch grid with full coverage.

    Stride is round-half-up of size*(1-overlap); trailing anchors clamp
    to the edge so the last patch ends exactly at the raster border.
    """
    stride = int(np.floor(cfg.patch_size * (1.0 - cfg.overlap_fraction) + 0.5))
    stride = max(stride, 1)
    xs = _axis_anchors(width, cfg.patch_size, stride)
    ys = _axis_anchors(height, cfg.patch_size, stride)
    return [(x, y) for y in ys for x in xs]


def _pad_to(data: np.ndarray, height: int, width: int, fill) -> np.ndarray:
    if data.shape[0] >= height and data.shape[1] >= width:
        return data
    shape = (height, width) + data.shape[2:]
    out = np.full(shape, fill, dtype=data.dtype)
    out[: data.shape[0], : data.shape[1]] = data
    return out


def _crop_patch(data: np.ndarray, x: int, y: int, size: int, fill) -> np.ndarray:
    window = data[y : y + size, x : x + size]
    return _pad_to(window.copy(), size, size, fill)


def cut_patches(
    he_img: RasterImage,
    ck_img: RasterImage,
    gt: LabelMask,
    cfg: PatchGridConfig,
    slide_id: str = "",
    core_id: int = 0,
    level_factor: int = 1,
    reg_factor: int = 4,
    tissue: TissueConfig = TissueConfig(),
) -> list[PatchRecord]:
    """Cut the anchor grid, re-register each patch pair, filter by tissue.

    The core-level shift must already be applied to the CK raster and the
    ground truth; the per-patch correlation only mops up residual drift,
    and its shift is applied to the ground-truth crop rather than
    re-cutting. Patches under the tissue minimum are dropped.
    """
    if he_img.dims != ck_img.dims or he_img.dims != (gt.data.shape[1], gt.data.shape[0]):
        raise ValueError("HE, CK, and ground truth dimensions must agree")

    records = []
    for x, y in patch_grid(he_img.width, he_img.height, cfg):
        he_patch = RasterImage(
            _crop_patch(he_img.data, x, y, cfg.patch_size, 255), he_img.mpp
        )
        ck_patch = RasterImage(
            _crop_patch(ck_img.data, x, y, cfg.patch_size, 255), ck_img.mpp
        )
        gt_patch = LabelMask(_crop_patch(gt.data, x, y, cfg.patch_size, 0), gt.mpp)

        residual = register_pair(he_patch, ck_patch, factor=reg_factor)
        if residual.dx or residual.dy:
            gt_patch = apply_shift(gt_patch, residual.negated())

        fraction = float(tissue_mask(he_patch, tissue).data.mean())
        if fraction < cfg.min_tissue_fraction:
            continue

        records.append(
            PatchRecord(
                he=he_patch,
                gt=gt_patch,
                set_tag=assign_set(gt_patch),
                origin=PatchOrigin(slide_id, core_id, x, y, level_factor),
                shift_applied=residual,
                tissue_fraction=fraction,
            )
        )
    return records


def assign_set(gt: LabelMask) -> str:
    """In situ wins, then benign; everything else is the invasive set."""
    present = np.bincount(gt.data.ravel(), minlength=4) > 0
    if present[3]:
        return "insitu"
    if present[2]:
        return "benign"
    return "invasive"


# --------------------------------------------------------------------------- #
# Augmentation
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class AugmentationConfig:
    p_flip: float = 0.5
    p_rot90: float = 0.5
    p_brightness: float = 0.5
    p_hue: float = 0.5
    p_saturation: float = 0.5
    p_shift: float = 0.5
    p_blur: float = 0.1
    brightness_range: float = 0.2
    hue_degrees: float = 18.0
    saturation_range: float = 0.2
    shift_max_px: int = 32
    blur_sigma: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self) -> None:
        probs = {
            "p_flip": self.p_flip,
            "p_rot90": self.p_rot90,
            "p_brightness": self.p_brightness,
            "p_hue": self.p_hue,
            "p_saturation": self.p_saturation,
            "p_shift": self.p_shift,
            "p_blur": self.p_blur,
        }
        bad = sorted(k for k, v in probs.items() if not 0.0 <= v <= 1.0)
        if bad:
            raise ValueError(f"probabilities outside [0, 1]: {', '.join(bad)}")


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        safe = np.where(delta > 0, delta, 1.0)
        rc = (maxc - r) / safe
        gc = (maxc - g) / safe
        bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, choice in enumerate(choices):
        out[i == k] = choice[i == k]
    return out


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


def augment(rec: PatchRecord, cfg: AugmentationConfig, seed: int) -> PatchRecord:
    """Seeded per-record augmentation, geometry shared with ground truth.

    The generator is derived from (seed, origin), so the same record and
    seed always produce the same output. Decision draws happen in a fixed
    order regardless of which techniques fire.
    """
    rng = np.random.default_rng(rec.origin.seed_words(seed))
    img = rec.he.data.astype(np.float64)
    gt = rec.gt.data.copy()

    if rng.random() < cfg.p_flip:
        axis = int(rng.integers(2))
        img = np.flip(img, axis=axis)
        gt = np.flip(gt, axis=axis)
    if rng.random() < cfg.p_rot90:
        k = int(rng.integers(1, 4))
        img = np.rot90(img, k=k)
        gt = np.rot90(gt, k=k)
    if rng.random() < cfg.p_brightness:
        img = img * (1.0 + rng.uniform(-cfg.brightness_range, cfg.brightness_range))
    if rng.random() < cfg.p_hue:
        delta = rng.uniform(-cfg.hue_degrees, cfg.hue_degrees) / 360.0
        hsv = _rgb_to_hsv(np.clip(img, 0, 255) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
        img = _hsv_to_rgb(hsv) * 255.0
    if rng.random() < cfg.p_saturation:
        factor = 1.0 + rng.uniform(-cfg.saturation_range, cfg.saturation_range)
        hsv = _rgb_to_hsv(np.clip(img, 0, 255) / 255.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
        img = _hsv_to_rgb(hsv) * 255.0
    if rng.random() < cfg.p_shift:
        dx = int(rng.integers(-cfg.shift_max_px, cfg.shift_max_px + 1))
        dy = int(rng.integers(-cfg.shift_max_px, cfg.shift_max_px + 1))
        shift = ShiftVector(dx, dy)
        img = apply_shift(RasterImage(_to_uint8(img), rec.he.mpp), shift).data.astype(
            np.float64
        )
        gt = apply_shift(LabelMask(np.ascontiguousarray(gt), rec.gt.mpp), shift).data.copy()
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")

    out_gt = LabelMask(np.ascontiguousarray(gt), rec.gt.mpp)
    return replace(
        rec,
        he=RasterImage(_to_uint8(img), rec.he.mpp),
        gt=out_gt,
        set_tag=rec.set_tag,
    )


def balanced_sampler(
    sets: dict[str, list[PatchRecord]], seed: int
) -> Iterator[PatchRecord]:
    """Infinite stream: uniform over the three sets, uniform within a set.

    Validates eagerly so misconfiguration surfaces at construction, not
    at the first draw.
    """
    for tag in SET_TAGS:
        if not sets.get(tag):
            raise ConfigError(f"balanced sampling needs a non-empty {tag!r} set")
    pools = [sets[tag] for tag in SET_TAGS]

    def stream() -> Iterator[PatchRecord]:
        rng = np.random.default_rng(seed)
        while True:
            pool = pools[int(rng.integers(len(pools)))]
            yield pool[int(rng.integers(len(pool)))]

    return stream()


# --------------------------------------------------------------------------- #
# Patch store
# --------------------------------------------------------------------------- #

def write_patch_store(records: list[PatchRecord], root: str | Path) -> Path:
    """Persist records as he_<n>.png / gt_<n>.png plus an index.jsonl."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for n, rec in enumerate(records):
        he_name = f"he_{n}.png"
        gt_name = f"gt_{n}.png"
        Image.fromarray(rec.he.data).save(root / he_name)
        write_label_mask(rec.gt, root / gt_name)
        row = {
            "n": n,
            "slide": rec.origin.slide,
            "core": rec.origin.core,
            "x": rec.origin.x,
            "y": rec.origin.y,
            "level_factor": rec.origin.level_factor,
            "set": rec.set_tag,
            "tissue_fraction": round(rec.tissue_fraction, 6),
            "shift": [rec.shift_applied.dx, rec.shift_applied.dy],
            "mpp": rec.he.mpp,
            "he": he_name,
            "gt": gt_name,
        }
        lines.append(json.dumps(row, sort_keys=True))
    (root / "index.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


def read_patch_store(root: str | Path) -> list[PatchRecord]:
    from PIL import Image

    root = Path(root)
    index = root / "index.jsonl"
    if not index.is_file():
        raise FormatError(f"patch store at {root} has no index.jsonl")
    records = []
    for line_no, line in enumerate(index.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{index}:{line_no}: malformed index row: {exc}") from exc
        he_path = root / row["he"]
        if not he_path.is_file():
            raise FormatError(f"patch store missing image {he_path}")
        he = RasterImage(np.asarray(Image.open(he_path).convert("RGB")), float(row["mpp"]))
        gt = read_label_mask(root / row["gt"])
        shift = ShiftVector(int(row["shift"][0]), int(row["shift"][1]))
        records.append(
            PatchRecord(
                he=he,
                gt=gt,
                set_tag=row["set"],
                origin=PatchOrigin(
                    row["slide"], int(row["core"]), int(row["x"]), int(row["y"]),
                    int(row["level_factor"]),
                ),
                shift_applied=shift,
                tissue_fraction=float(row["tissue_fraction"]),
            )
        )
    return records
