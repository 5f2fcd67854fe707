"""Tissue-microarray core detection, size filtering, and HE/CK pairing.

Detection runs on a low-resolution pyramid level: tissue thresholding,
component labeling, a minimum-pixel cut, then rejection of regions whose
area or equivalent diameter deviates from the median by more than a
configurable fraction. Surviving regions are mapped back to level 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .raster import PyramidImage, RasterImage
from .maskops import TissueConfig, connected_components, tissue_mask
from .register import ShiftVector


@dataclass(frozen=True)
class ExtractorConfig:
    min_region_px: int = 100
    max_median_deviation: float = 0.5
    lowres_max_width: int = 2048
    target_level_factor: int = 1
    tissue: TissueConfig = TissueConfig()

    def __post_init__(self) -> None:
        if self.min_region_px < 1:
            raise ValueError("min_region_px must be >= 1")
        if self.max_median_deviation <= 0:
            raise ValueError("max_median_deviation must be > 0")


@dataclass(frozen=True)
class CoreRegion:
    """One detected core: level-0 bbox/centroid, low-res size statistics."""

    id: int
    bbox: tuple[int, int, int, int]  # x, y, w, h at level 0
    centroid: tuple[float, float]    # level 0
    area_px: int                     # low-res pixels
    equiv_diameter_px: float         # low-res, 2*sqrt(area/pi)
    detect_factor: int = 1           # low-res level factor used for detection


@dataclass(frozen=True)
class CorePair:
    he: CoreRegion
    ck: CoreRegion
    he_img: RasterImage | None = None
    ck_img: RasterImage | None = None
    shift: ShiftVector | None = None
    excluded: bool = False
    reason: str = ""
    # level-0 (x, y, w, h) of the union crop the rasters were taken from
    window: tuple[int, int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.excluded and not self.reason:
            raise ValueError("excluded pairs must carry a reason")
        if self.he_img is not None and self.ck_img is not None:
            if not math.isclose(self.he_img.mpp, self.ck_img.mpp, rel_tol=1e-6):
                raise ValueError(
                    f"paired rasters must share mpp: {self.he_img.mpp} vs {self.ck_img.mpp}"
                )


def _detection_level(slide: PyramidImage, max_width: int) -> int:
    for i, level in enumerate(slide.levels):
        if level.width <= max_width:
            return i
    return len(slide.levels) - 1


def extract_cores(slide: PyramidImage, cfg: ExtractorConfig = ExtractorConfig()) -> list[CoreRegion]:
    """Detect TMA cores; empty list when nothing survives the filters."""
    idx = _detection_level(slide, cfg.lowres_max_width)
    level = slide.levels[idx]
    factor = slide.factors[idx]

    mask = tissue_mask(level, cfg.tissue)
    _, regions = connected_components(mask, connectivity=8)
    regions = [r for r in regions if r.area_px >= cfg.min_region_px]
    if not regions:
        return []

    areas = np.array([r.area_px for r in regions], dtype=np.float64)
    diams = 2.0 * np.sqrt(areas / math.pi)
    med_area = float(np.median(areas))
    med_diam = float(np.median(diams))

    keep = (np.abs(areas - med_area) / med_area <= cfg.max_median_deviation) & (
        np.abs(diams - med_diam) / med_diam <= cfg.max_median_deviation
    )

    survivors = []
    for region, diam, ok in zip(regions, diams, keep):
        if not ok:
            continue
        x, y, w, h = region.bbox
        cx, cy = region.centroid
        survivors.append(
            (
                (y * factor, x * factor),
                CoreRegion(
                    id=0,
                    bbox=(x * factor, y * factor, w * factor, h * factor),
                    centroid=(cx * factor, cy * factor),
                    area_px=region.area_px,
                    equiv_diameter_px=float(diam),
                    detect_factor=factor,
                ),
            )
        )
    survivors.sort(key=lambda item: item[0])
    return [replace(core, id=i) for i, (_, core) in enumerate(survivors)]


def pair_cores(
    he: list[CoreRegion],
    ck: list[CoreRegion],
    max_dist: float | None = None,
) -> tuple[list[CorePair], list[CoreRegion], list[CoreRegion]]:
    """Greedily match cores by centroid distance, closest pairs first.

    max_dist defaults to half the median HE core diameter at level 0.
    Returns (pairs, unmatched_he, unmatched_ck).
    """
    if max_dist is None:
        if he:
            diam0 = np.median([c.equiv_diameter_px * c.detect_factor for c in he])
            max_dist = float(diam0) / 2.0
        else:
            max_dist = 0.0

    if not he or not ck:
        return [], list(he), list(ck)

    he_c = np.array([c.centroid for c in he], dtype=np.float64)
    ck_c = np.array([c.centroid for c in ck], dtype=np.float64)
    dist = np.hypot(
        he_c[:, 0:1] - ck_c[None, :, 0], he_c[:, 1:2] - ck_c[None, :, 1]
    )

    pairs: list[CorePair] = []
    matched_he = np.zeros(len(he), dtype=bool)
    matched_ck = np.zeros(len(ck), dtype=bool)
    work = dist.copy()
    for _ in range(min(len(he), len(ck))):
        i, j = np.unravel_index(int(np.argmin(work)), work.shape)
        if not np.isfinite(work[i, j]) or work[i, j] > max_dist:
            break
        pairs.append(CorePair(he=he[i], ck=ck[j]))
        matched_he[i] = True
        matched_ck[j] = True
        work[i, :] = np.inf
        work[:, j] = np.inf

    unmatched_he = [c for c, m in zip(he, matched_he) if not m]
    unmatched_ck = [c for c, m in zip(ck, matched_ck) if not m]
    return pairs, unmatched_he, unmatched_ck


def extract_pair_rasters(
    slide_he: PyramidImage,
    slide_ck: PyramidImage,
    pair: CorePair,
    level_factor: int,
) -> CorePair:
    """Crop the union bbox of the pair from both slides at one level."""
    he_level = slide_he.level_for_factor(level_factor)
    ck_level = slide_ck.level_for_factor(level_factor)

    hx, hy, hw, hh = pair.he.bbox
    cx, cy, cw, ch = pair.ck.bbox
    x0 = min(hx, cx)
    y0 = min(hy, cy)
    x1 = max(hx + hw, cx + cw)
    y1 = max(hy + hh, cy + ch)

    # level coordinates; clamp to the raster both levels can serve
    lx0 = x0 // level_factor
    ly0 = y0 // level_factor
    lx1 = -(-x1 // level_factor)
    ly1 = -(-y1 // level_factor)
    width = min(he_level.width, ck_level.width)
    height = min(he_level.height, ck_level.height)
    lx0 = max(0, min(lx0, width - 1))
    ly0 = max(0, min(ly0, height - 1))
    lx1 = max(lx0 + 1, min(lx1, width))
    ly1 = max(ly0 + 1, min(ly1, height))

    he_img = RasterImage(he_level.data[ly0:ly1, lx0:lx1].copy(), he_level.mpp)
    ck_img = RasterImage(ck_level.data[ly0:ly1, lx0:lx1].copy(), ck_level.mpp)
    window = (
        lx0 * level_factor,
        ly0 * level_factor,
        (lx1 - lx0) * level_factor,
        (ly1 - ly0) * level_factor,
    )
    return replace(pair, he_img=he_img, ck_img=ck_img, window=window)
