"""Deterministic generator of paired HE-like / CK-like slides with exact
truth labels and annotation polygons.

Cores are discs on a white slide; epithelial structures are ellipse-based
with seeded jitter, placed on a ring of non-overlapping slots inside each
core. The CK render paints DAB through the Beer-Lambert forward path on
the exact truth pixels, so thresholding the deconvolved channel recovers
the truth up to blur effects at boundaries. Realism is out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .maskops import AnnotationSet, Polygon, _fill_polygon
from .raster import LabelMask, PyramidImage, RasterImage, build_pyramid
from .register import ShiftVector, apply_shift
from .stains import StainMatrix, compose_rgb

# HE render colors (no eosin channel in the H-DAB matrix; flat colors do)
_HE_TISSUE = (230, 180, 200)
_HE_EPITHELIUM = (150, 110, 170)
_HE_LUMEN = (245, 245, 245)

# CK render concentrations through the default stain matrix
_CK_COUNTERSTAIN = 0.15   # hematoxylin everywhere in the disc
_CK_DAB = 0.5             # twice the detection threshold, so the blurred
                          # boundary sits on the geometric edge

_RING_WIDTH = 20.0        # benign gland epithelium thickness, px
_MIN_LUMEN_RADIUS = 24.0  # keeps lumens above the hole-filling cutoff
_SLOT_CLEARANCE = 12.0    # blur support between neighboring structures


@dataclass(frozen=True)
class SynthSpec:
    grid: tuple[int, int] = (4, 4)  # rows, cols
    core_diameter: int = 400
    benign_per_core: int = 1
    insitu_per_core: int = 1
    invasive_per_core: int = 1
    ck_false_negative_rate: float = 0.0
    global_shift: tuple[int, int] = (0, 0)
    noise_sd: float = 0.0
    seed: int = 0
    mpp: float = 0.3448
    factors: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self) -> None:
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ValueError("grid must have at least one row and column")
        if self.core_diameter < 50:
            raise ValueError("core_diameter must be >= 50 px")
        for name in ("benign_per_core", "insitu_per_core", "invasive_per_core"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.ck_false_negative_rate <= 1.0:
            raise ValueError("ck_false_negative_rate must be in [0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.mpp <= 0:
            raise ValueError("mpp must be > 0")


@dataclass(frozen=True)
class SynthResult:
    he: PyramidImage
    ck: PyramidImage
    truth: LabelMask                      # full slide, level 0, HE frame
    core_truths: tuple[LabelMask, ...]    # cropped to core bboxes
    core_bboxes: tuple[tuple[int, int, int, int], ...]
    ann: AnnotationSet


def _slot_capacity(slot_radius: float, max_struct_radius: float) -> int:
    """Largest slot count whose neighbors keep blur-safe clearance."""
    need = 2.0 * max_struct_radius + _SLOT_CLEARANCE
    for n in range(64, 1, -1):
        if 2.0 * slot_radius * math.sin(math.pi / n) >= need:
            return n
    return 1


def _ellipse_polygon(cx: float, cy: float, a: float, b: float, theta: float, n: int = 64) -> np.ndarray:
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    ex = a * np.cos(t)
    ey = b * np.sin(t)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    xs = cx + ex * cos_t - ey * sin_t
    ys = cy + ex * sin_t + ey * cos_t
    return np.stack([xs, ys], axis=1)


@dataclass
class _Structure:
    kind: str                 # benign / insitu / invasive
    outer: np.ndarray         # global level-0 polygon
    inner: np.ndarray | None  # lumen polygon for glands
    stained: bool


def _plan_core(
    rng: np.random.Generator,
    center: tuple[float, float],
    radius: float,
    spec: SynthSpec,
) -> list[_Structure]:
    kinds = (
        ["benign"] * spec.benign_per_core
        + ["insitu"] * spec.insitu_per_core
        + ["invasive"] * spec.invasive_per_core
    )
    if not kinds:
        return []

    slot_radius = 0.55 * radius
    r_max = 0.30 * radius
    capacity = _slot_capacity(slot_radius, r_max)
    if len(kinds) > capacity:
        raise GenerationError(
            f"{len(kinds)} structures per core exceed the {capacity}-slot capacity "
            f"of a {int(2 * radius)}-px core"
        )
    if slot_radius + r_max > radius - 10.0:
        raise GenerationError("structure budget exceeds the core radius")
    benign_min = _RING_WIDTH + _MIN_LUMEN_RADIUS + 11.0
    if spec.benign_per_core and r_max < benign_min:
        raise GenerationError(
            f"core too small for benign glands: need max radius >= {benign_min:.0f} px, "
            f"have {r_max:.0f}"
        )

    base_angle = rng.uniform(0.0, 2.0 * math.pi)
    structures = []
    for k, kind in enumerate(kinds):
        angle = base_angle + 2.0 * math.pi * k / len(kinds)
        sx = center[0] + slot_radius * math.cos(angle)
        sy = center[1] + slot_radius * math.sin(angle)
        if kind == "benign":
            a = rng.uniform(benign_min, r_max)
            b = rng.uniform(0.9, 1.0) * a
        else:
            a = rng.uniform(0.6, 1.0) * r_max
            b = rng.uniform(0.7, 1.0) * a
        theta = rng.uniform(0.0, math.pi)
        stained = bool(rng.random() >= spec.ck_false_negative_rate)
        outer = _ellipse_polygon(sx, sy, a, b, theta)
        inner = None
        if kind == "benign":
            inner = _ellipse_polygon(sx, sy, a - _RING_WIDTH, b - _RING_WIDTH, theta)
        structures.append(_Structure(kind, outer, inner, stained))
    return structures


def _disc_mask(size: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cx = cy = size / 2.0
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= radius * radius


_KIND_CODE = {"invasive": 1, "benign": 2, "insitu": 3}


def generate(spec: SynthSpec) -> SynthResult:
    rows, cols = spec.grid
    d = spec.core_diameter
    radius = d / 2.0
    margin = int(round(0.2 * d))
    gap = int(round(0.25 * d))
    width = 2 * margin + cols * d + (cols - 1) * gap
    height = 2 * margin + rows * d + (rows - 1) * gap

    matrix = StainMatrix.hdab()
    he = np.full((height, width, 3), 255, dtype=np.uint8)
    ck = np.full((height, width, 3), 255, dtype=np.uint8)
    truth = np.zeros((height, width), dtype=np.uint8)

    disc = _disc_mask(d, radius)
    polygons: list[Polygon] = []
    bboxes: list[tuple[int, int, int, int]] = []

    for idx in range(rows * cols):
        r, c = divmod(idx, cols)
        x0 = margin + c * (d + gap)
        y0 = margin + r * (d + gap)
        center = (x0 + radius, y0 + radius)
        bboxes.append((x0, y0, d, d))

        rng = np.random.default_rng([spec.seed, 7, idx])
        structures = _plan_core(rng, center, radius, spec)

        # local truth and stain masks for this core tile
        local_truth = np.zeros((d, d), dtype=np.uint8)
        stained_mask = np.zeros((d, d), dtype=bool)
        for s in structures:
            shape = np.zeros((d, d), dtype=bool)
            _fill_polygon(shape, s.outer - (x0, y0))
            if s.inner is not None:
                lumen = np.zeros((d, d), dtype=bool)
                _fill_polygon(lumen, s.inner - (x0, y0))
                shape &= ~lumen
            local_truth[shape] = _KIND_CODE[s.kind]
            if s.stained:
                stained_mask |= shape

        # HE tile: flat tissue, darker epithelium, bright gland lumens
        he_tile = np.full((d, d, 3), 255, dtype=np.uint8)
        he_tile[disc] = _HE_TISSUE
        for s in structures:
            if s.inner is not None:
                lumen = np.zeros((d, d), dtype=bool)
                _fill_polygon(lumen, s.inner - (x0, y0))
                he_tile[lumen] = _HE_LUMEN
        he_tile[local_truth > 0] = _HE_EPITHELIUM

        # CK tile: counterstain over the disc, DAB on stained truth pixels
        conc = np.zeros((d, d, 3), dtype=np.float64)
        conc[disc, 0] = _CK_COUNTERSTAIN
        conc[stained_mask, 1] = _CK_DAB
        ck_tile = compose_rgb(conc, matrix, spec.mpp).data.copy()
        ck_tile[~disc] = 255

        he[y0 : y0 + d, x0 : x0 + d][disc] = he_tile[disc]
        ck[y0 : y0 + d, x0 : x0 + d][disc] = ck_tile[disc]
        truth[y0 : y0 + d, x0 : x0 + d][disc] = local_truth[disc]

        case_id = f"core{idx}"
        for s in structures:
            if s.kind in ("benign", "insitu"):
                polygons.append(Polygon(s.kind, s.outer, case_id=case_id))

    if spec.noise_sd > 0:
        he = _add_noise(he, spec.noise_sd, np.random.default_rng([spec.seed, 101]))
        ck = _add_noise(ck, spec.noise_sd, np.random.default_rng([spec.seed, 102]))

    ck_img = RasterImage(ck, spec.mpp)
    if spec.global_shift != (0, 0):
        ck_img = apply_shift(ck_img, ShiftVector(*spec.global_shift))

    truth_mask = LabelMask(truth, spec.mpp)
    core_truths = tuple(
        LabelMask(truth[y : y + h, x : x + w].copy(), spec.mpp)
        for x, y, w, h in bboxes
    )
    return SynthResult(
        he=build_pyramid(RasterImage(he, spec.mpp), spec.factors),
        ck=build_pyramid(ck_img, spec.factors),
        truth=truth_mask,
        core_truths=core_truths,
        core_bboxes=tuple(bboxes),
        ann=AnnotationSet(tuple(polygons)),
    )


def _add_noise(img: np.ndarray, sd: float, rng: np.random.Generator) -> np.ndarray:
    noisy = img.astype(np.float64) + rng.normal(0.0, sd, size=img.shape)
    return np.floor(np.clip(noisy, 0.0, 255.0) + 0.5).astype(np.uint8)
