"""Rigid translation alignment by phase cross-correlation.

The pair scheme: grayscale both rasters, equalize the CK side only,
mean-pool by a fixed factor, correlate, and scale the recovered shift
back up. Shifts are integer pixels; at working resolution they are
therefore multiples of the downsample factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import BinaryMask, LabelMask, RasterImage, downsample


@dataclass(frozen=True)
class ShiftVector:
    """Integer displacement of the moving raster relative to the fixed one."""

    dx: int
    dy: int
    confidence: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    def negated(self) -> "ShiftVector":
        return ShiftVector(-self.dx, -self.dy, self.confidence)

    def scaled(self, factor: int) -> "ShiftVector":
        return ShiftVector(self.dx * factor, self.dy * factor, self.confidence)


def to_gray(img: RasterImage) -> RasterImage:
    """Luma conversion, rounded half-up; grayscale input passes through."""
    if img.channels == 1:
        return img
    luma = (
        0.299 * img.data[:, :, 0].astype(np.float64)
        + 0.587 * img.data[:, :, 1]
        + 0.114 * img.data[:, :, 2]
    )
    return RasterImage(np.floor(luma + 0.5).astype(np.uint8), img.mpp)


def equalize(gray: RasterImage) -> RasterImage:
    """Cumulative-histogram equalization over 256 bins.

    The remap is floor(cdf * 255), which leaves a perfectly uniform
    histogram unchanged and sends the top occupied bin to 255.
    """
    if gray.channels != 1:
        raise ValueError("equalize expects a single-channel raster")
    hist = np.bincount(gray.data.ravel(), minlength=256)
    cdf = np.cumsum(hist) / gray.data.size
    lut = np.floor(cdf * 255.0).astype(np.uint8)
    return RasterImage(lut[gray.data], gray.mpp)


def phase_correlation(fixed: RasterImage, moving: RasterImage) -> ShiftVector:
    """Translation of `moving` relative to `fixed` via the cross-power peak.

    Peak coordinates above half the axis length wrap negative; confidence
    is the peak's share of the correlation surface energy.
    """
    if fixed.dims != moving.dims:
        raise ValueError(f"dimensions differ: {fixed.dims} vs {moving.dims}")
    a = fixed.data.astype(np.float64)
    b = moving.data.astype(np.float64)
    fa = np.fft.fft2(a)
    fb = np.fft.fft2(b)
    cross = fa * np.conj(fb)
    mag = np.abs(cross)
    cross = np.where(mag > 1e-12, cross / np.where(mag > 1e-12, mag, 1.0), 0.0)
    surface = np.abs(np.fft.ifft2(cross))

    peak = float(surface.max())
    total = float(surface.sum())
    confidence = min(max(peak / total, 0.0), 1.0) if total > 0 else 0.0

    py, px = np.unravel_index(int(np.argmax(surface)), surface.shape)
    h, w = surface.shape
    if py > h / 2:
        py -= h
    if px > w / 2:
        px -= w
    # the cross-power peak sits at minus the displacement of `moving`
    return ShiftVector(dx=-int(px), dy=-int(py), confidence=confidence)


def register_pair(he: RasterImage, ck: RasterImage, factor: int = 4) -> ShiftVector:
    """Estimate the CK-to-HE shift at full resolution.

    Both rasters are converted to grayscale, the CK side is equalized for
    contrast, both are mean-pooled by `factor`, and the low-resolution
    shift is scaled back up.
    """
    if he.dims != ck.dims:
        raise ValueError(f"dimensions differ: {he.dims} vs {ck.dims}")
    he_gray = to_gray(he)
    ck_gray = equalize(to_gray(ck))
    if factor > 1:
        he_gray = downsample(he_gray, factor)
        ck_gray = downsample(ck_gray, factor)
    return phase_correlation(he_gray, ck_gray).scaled(factor)


def apply_shift(raster, s: ShiftVector):
    """Translate content by (dx, dy) without wraparound.

    Vacated pixels become background: 255 for images, false for binary
    masks, class 0 for label masks. The input type is preserved.
    """
    if isinstance(raster, RasterImage):
        fill: object = 255
    elif isinstance(raster, BinaryMask):
        fill = False
    elif isinstance(raster, LabelMask):
        fill = 0
    else:
        raise TypeError(f"cannot shift {type(raster).__name__}")

    data = raster.data
    out = np.full_like(data, fill)
    h, w = data.shape[:2]
    dx, dy = s.dx, s.dy
    src_x = slice(max(0, -dx), min(w, w - dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_y, dst_x] = data[src_y, src_x]

    if isinstance(raster, RasterImage):
        return RasterImage(out, raster.mpp)
    if isinstance(raster, BinaryMask):
        return BinaryMask(out, raster.mpp)
    return LabelMask(out, raster.mpp)
