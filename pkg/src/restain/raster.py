"""Raster data model shared by every pipeline stage.

Images are thin wrappers around numpy arrays plus a microns-per-pixel
(mpp) tag. Arrays are marked read-only on construction; constructing a
wrapper takes ownership of the array passed in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

# Viewing palette for class-coded masks: background white, invasive
# purple, benign red, in situ blue.
LABEL_PALETTE = {
    0: (255, 255, 255),
    1: (128, 0, 128),
    2: (220, 0, 0),
    3: (0, 0, 220),
}

N_CLASSES = 4


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RasterImage:
    """8-bit raster, single-channel (h, w) or RGB (h, w, 3), with isotropic mpp."""

    data: np.ndarray
    mpp: float

    def __post_init__(self) -> None:
        if self.data.dtype != np.uint8:
            raise ValueError(f"raster samples must be uint8, got {self.data.dtype}")
        if self.data.ndim == 2:
            pass
        elif self.data.ndim == 3 and self.data.shape[2] == 3:
            pass
        else:
            raise ValueError(f"raster must be (h, w) or (h, w, 3), got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("raster dimensions must be positive")
        if not self.mpp > 0:
            raise ValueError(f"mpp must be > 0, got {self.mpp}")
        object.__setattr__(self, "data", _freeze(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int]:
        """(width, height)."""
        return (self.data.shape[1], self.data.shape[0])


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel boolean raster with mpp."""

    data: np.ndarray
    mpp: float

    def __post_init__(self) -> None:
        if self.data.dtype != np.bool_:
            raise ValueError(f"mask bits must be bool, got {self.data.dtype}")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"mask must be a non-empty 2-D array, got shape {self.data.shape}")
        if not self.mpp > 0:
            raise ValueError(f"mpp must be > 0, got {self.mpp}")
        object.__setattr__(self, "data", _freeze(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        """(width, height)."""
        return (self.data.shape[1], self.data.shape[0])


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class codes: 0 background, 1 invasive, 2 benign, 3 in situ."""

    data: np.ndarray
    mpp: float

    def __post_init__(self) -> None:
        if self.data.dtype != np.uint8:
            raise ValueError(f"label codes must be uint8, got {self.data.dtype}")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"label mask must be a non-empty 2-D array, got shape {self.data.shape}")
        if self.data.size and self.data.max() >= N_CLASSES:
            raise ValueError(f"label codes must be < {N_CLASSES}, got max {self.data.max()}")
        if not self.mpp > 0:
            raise ValueError(f"mpp must be > 0, got {self.mpp}")
        object.__setattr__(self, "data", _freeze(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        """(width, height)."""
        return (self.data.shape[1], self.data.shape[0])

    def onehot(self) -> np.ndarray:
        """Return (h, w, 4) uint8 one-hot planes; planes sum to 1 everywhere."""
        return np.eye(N_CLASSES, dtype=np.uint8)[self.data]


@dataclass(frozen=True)
class PyramidImage:
    """Ordered resolution levels; level 0 is the highest resolution."""

    levels: tuple[RasterImage, ...]
    factors: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        levels = tuple(self.levels)
        factors = tuple(int(f) for f in self.factors) if self.factors else (1,)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "factors", factors)
        if len(levels) != len(factors):
            raise ValueError(f"{len(levels)} levels but {len(factors)} factors")
        if not levels:
            raise ValueError("pyramid needs at least one level")
        if factors[0] != 1:
            raise ValueError(f"level 0 factor must be 1, got {factors[0]}")
        if any(b <= a for a, b in zip(factors, factors[1:])):
            raise ValueError(f"factors must be strictly increasing, got {factors}")
        base = levels[0]
        for k, (lvl, f) in enumerate(zip(levels, factors)):
            if abs(lvl.width - base.width / f) > 1 or abs(lvl.height - base.height / f) > 1:
                raise ValueError(
                    f"level {k} is {lvl.width}x{lvl.height}, inconsistent with "
                    f"factor {f} of {base.width}x{base.height}"
                )
            if not math.isclose(lvl.mpp, base.mpp * f, rel_tol=1e-6):
                raise ValueError(f"level {k} mpp {lvl.mpp} != level-0 mpp x {f}")

    @property
    def mpp_level0(self) -> float:
        return self.levels[0].mpp

    def level_for_factor(self, factor: int) -> RasterImage:
        """Return the level at exactly this downsample factor."""
        for lvl, f in zip(self.levels, self.factors):
            if f == factor:
                return lvl
        raise ValueError(f"pyramid has no level with factor {factor}; available: {self.factors}")


def downsample(img: RasterImage, factor: int) -> RasterImage:
    """Mean-pool by an integer factor, rounding half-up.

    Output dims are ceil(dims / factor); trailing partial blocks are
    averaged over the pixels they actually contain. Output mpp scales by
    the factor.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return RasterImage(img.data, img.mpp)
    h, w = img.data.shape[:2]
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(img.data.astype(np.float64), row_idx, axis=0), col_idx, axis=1)
    block_h = np.diff(np.append(row_idx, h))
    block_w = np.diff(np.append(col_idx, w))
    counts = np.outer(block_h, block_w)
    if img.data.ndim == 3:
        counts = counts[:, :, None]
    mean = sums / counts
    return RasterImage(np.floor(mean + 0.5).astype(np.uint8), img.mpp * factor)


def downsample_labels(mask: LabelMask, factor: int) -> LabelMask:
    """Majority-vote downsample of class codes; ties go to the lowest code."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return LabelMask(mask.data, mask.mpp)
    h, w = mask.data.shape
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    counts = np.empty((len(row_idx), len(col_idx), N_CLASSES), dtype=np.int64)
    for c in range(N_CLASSES):
        plane = (mask.data == c).astype(np.int64)
        counts[:, :, c] = np.add.reduceat(np.add.reduceat(plane, row_idx, axis=0), col_idx, axis=1)
    # argmax picks the first maximum, i.e. the lowest class code on ties
    return LabelMask(np.argmax(counts, axis=2).astype(np.uint8), mask.mpp * factor)


def _clamp_window(width: int, height: int, x: int, y: int, w: int, h: int) -> tuple[int, int, int, int]:
    if w < 1 or h < 1:
        raise ValueError(f"crop window must be non-empty, got {w}x{h}")
    x0, y0 = max(int(x), 0), max(int(y), 0)
    x1, y1 = min(int(x) + int(w), width), min(int(y) + int(h), height)
    if x0 >= x1 or y0 >= y1:
        raise ValueError(
            f"crop window ({x},{y},{w},{h}) lies fully outside a {width}x{height} raster"
        )
    return x0, y0, x1, y1


def crop(img, x: int, y: int, w: int, h: int):
    """Copy a window out of a RasterImage / BinaryMask / LabelMask.

    The window is clamped to the raster bounds; a window fully outside
    raises ValueError. The input type is preserved and mpp carried over.
    """
    x0, y0, x1, y1 = _clamp_window(img.width, img.height, x, y, w, h)
    window = img.data[y0:y1, x0:x1].copy()
    return type(img)(window, img.mpp)


def area_um2_to_pixels(area_um2: float, mpp: float) -> float:
    """Convert a physical area threshold to a (real-valued) pixel count."""
    if not mpp > 0:
        raise ValueError(f"mpp must be > 0, got {mpp}")
    if area_um2 < 0:
        raise ValueError(f"area must be >= 0, got {area_um2}")
    return area_um2 / (mpp * mpp)


def pixels_to_area_um2(pixels: float, mpp: float) -> float:
    if not mpp > 0:
        raise ValueError(f"mpp must be > 0, got {mpp}")
    return pixels * mpp * mpp


def build_pyramid(level0: RasterImage, factors: tuple[int, ...] = (1, 2, 4)) -> PyramidImage:
    """Construct a pyramid by mean-pool downsampling of the base level."""
    levels = [level0 if f == 1 else downsample(level0, f) for f in factors]
    return PyramidImage(tuple(levels), tuple(factors))


# --------------------------------------------------------------------------- #
# On-disk formats
# --------------------------------------------------------------------------- #

def write_pyramid(pyr: PyramidImage, path: str | Path) -> None:
    """Write the directory-pyramid format: meta.json + level_<k>.png."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"mpp_level0": pyr.mpp_level0, "factors": list(pyr.factors)}
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    for k, lvl in enumerate(pyr.levels):
        Image.fromarray(lvl.data).save(path / f"level_{k}.png")


def read_pyramid(path: str | Path) -> PyramidImage:
    """Read a directory pyramid, validating metadata against level files."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"pyramid at {path} is missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        mpp0 = float(meta["mpp_level0"])
        factors = [int(f) for f in meta["factors"]]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"pyramid meta.json at {path} is malformed: {exc}") from exc
    levels = []
    for k, f in enumerate(factors):
        level_path = path / f"level_{k}.png"
        if not level_path.is_file():
            raise FormatError(f"pyramid at {path} is missing level {k} ({level_path.name})")
        arr = np.asarray(Image.open(level_path))
        levels.append(RasterImage(np.ascontiguousarray(arr, dtype=np.uint8), mpp0 * f))
    try:
        return PyramidImage(tuple(levels), tuple(factors))
    except ValueError as exc:
        raise FormatError(f"pyramid at {path}: {exc}") from exc


def write_label_mask(mask: LabelMask, path: str | Path) -> None:
    """Write a class-coded mask as a paletted PNG plus a meta.json sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.data, mode="P")
    palette = [0] * 768
    for code, rgb in LABEL_PALETTE.items():
        palette[code * 3 : code * 3 + 3] = rgb
    img.putpalette(palette)
    img.save(path)
    path.with_suffix(".json").write_text(json.dumps({"mpp": mask.mpp}, sort_keys=True) + "\n")


def read_label_mask(path: str | Path) -> LabelMask:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"label mask file {path} does not exist")
    sidecar = path.with_suffix(".json")
    if not sidecar.is_file():
        raise FormatError(f"label mask {path} is missing its meta sidecar {sidecar.name}")
    try:
        mpp = float(json.loads(sidecar.read_text())["mpp"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"label mask sidecar {sidecar} is malformed: {exc}") from exc
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise FormatError(f"label mask {path} must be single-channel, got mode {img.mode}")
    codes = np.ascontiguousarray(np.asarray(img), dtype=np.uint8)
    if codes.size and codes.max() >= N_CLASSES:
        raise FormatError(f"label mask {path} contains code {codes.max()} outside 0..{N_CLASSES - 1}")
    return LabelMask(codes, mpp)
