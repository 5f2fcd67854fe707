"""Connected components, area-based morphology, polygon rasterization,
mask algebra, and the tissue-detection rule.

Physical thresholds (um^2) are converted to pixel counts through the
mask's mpp and compared strictly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .raster import BinaryMask, RasterImage, area_um2_to_pixels

ANNOTATION_LABELS = ("benign", "insitu", "exclude", "case")

_GEOJSON_NAMES = {"Benign": "benign", "InSitu": "insitu", "Exclude": "exclude", "Case": "case"}
_LABEL_NAMES = {v: k for k, v in _GEOJSON_NAMES.items()}

_STRUCT_4 = ndimage.generate_binary_structure(2, 1)
_STRUCT_8 = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class Region:
    """One connected component: dense label, pixel count, bounding box."""

    label: int
    area_px: int
    bbox: tuple[int, int, int, int]  # x, y, w, h

    @property
    def centroid(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


@dataclass(frozen=True)
class Polygon:
    label: str
    vertices: np.ndarray  # (n, 2) float, level-0 pixel coordinates
    case_id: str | None = None

    def __post_init__(self) -> None:
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise FormatError(f"polygon needs >= 3 (x, y) vertices, got shape {verts.shape}")
        if self.label not in ANNOTATION_LABELS:
            raise FormatError(f"unknown annotation label {self.label!r}; expected one of {ANNOTATION_LABELS}")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)


@dataclass(frozen=True)
class AnnotationSet:
    polygons: tuple[Polygon, ...] = field(default=())

    def with_label(self, label: str) -> tuple[Polygon, ...]:
        return tuple(p for p in self.polygons if p.label == label)


@dataclass(frozen=True)
class MorphologyConfig:
    """Area rules in um^2: fill holes below, remove objects below."""

    fill_hole_below: float = 150.0
    remove_object_below: float = 25.0

    def __post_init__(self) -> None:
        if self.fill_hole_below < 0 or self.remove_object_below < 0:
            raise ValueError("morphology thresholds must be >= 0")


def connected_components(mask: BinaryMask, connectivity: int = 8) -> tuple[np.ndarray, list[Region]]:
    """Label maximal connected regions; labels are dense from 1.

    Returns the label raster and per-region pixel counts and bboxes.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _STRUCT_4 if connectivity == 4 else _STRUCT_8
    labels, n = ndimage.label(mask.data, structure=structure)
    regions: list[Region] = []
    if n:
        counts = np.bincount(labels.ravel())
        for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
            y, x = sl
            regions.append(
                Region(
                    label=lab,
                    area_px=int(counts[lab]),
                    bbox=(x.start, y.start, x.stop - x.start, y.stop - y.start),
                )
            )
    return labels, regions


def _small_component_lut(labels: np.ndarray, n: int, max_px: float, exclude: np.ndarray | None = None) -> np.ndarray:
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    small = counts.astype(np.float64) < max_px
    small[0] = False
    if exclude is not None:
        small[exclude] = False
    return small


def clean_epithelium_mask(mask: BinaryMask, cfg: MorphologyConfig) -> BinaryMask:
    """Fill small interior holes, then drop small fragments.

    Holes are 4-connected background components not touching the raster
    border with area (in um^2) strictly below cfg.fill_hole_below;
    objects are 8-connected foreground components strictly below
    cfg.remove_object_below. Fill runs before removal.
    """
    data = mask.data.copy()

    hole_labels, n_holes = ndimage.label(~data, structure=_STRUCT_4)
    if n_holes:
        border = np.unique(
            np.concatenate(
                [hole_labels[0, :], hole_labels[-1, :], hole_labels[:, 0], hole_labels[:, -1]]
            )
        )
        fill_px = area_um2_to_pixels(cfg.fill_hole_below, mask.mpp)
        fill = _small_component_lut(hole_labels, n_holes, fill_px, exclude=border[border > 0])
        data |= fill[hole_labels]

    obj_labels, n_obj = ndimage.label(data, structure=_STRUCT_8)
    if n_obj:
        remove_px = area_um2_to_pixels(cfg.remove_object_below, mask.mpp)
        remove = _small_component_lut(obj_labels, n_obj, remove_px)
        data &= ~remove[obj_labels]

    return BinaryMask(data, mask.mpp)


def rasterize(
    ann: AnnotationSet,
    label: str,
    width: int,
    height: int,
    level_factor: int = 1,
    mpp: float = 1.0,
    origin: tuple[float, float] = (0.0, 0.0),
) -> BinaryMask:
    """Scan-convert all polygons with a label into a pixel-center mask.

    Vertices are level-0 coordinates; `origin` (level-0) is subtracted and
    coordinates divided by `level_factor` before scan conversion. A pixel
    is set iff its center is inside any polygon under the even-odd rule.
    """
    out = np.zeros((height, width), dtype=bool)
    for poly in ann.with_label(label):
        verts = (poly.vertices - np.asarray(origin, dtype=np.float64)) / float(level_factor)
        _fill_polygon(out, verts)
    return BinaryMask(out, mpp)


def _fill_polygon(out: np.ndarray, verts: np.ndarray) -> None:
    height, width = out.shape
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    y_lo = max(int(np.floor(verts[:, 1].min() - 0.5)), 0)
    y_hi = min(int(np.ceil(verts[:, 1].max() + 0.5)), height)
    for y in range(y_lo, y_hi):
        yc = y + 0.5
        straddles = (y1 <= yc) != (y2 <= yc)
        if not straddles.any():
            continue
        t = (yc - y1[straddles]) / (y2[straddles] - y1[straddles])
        crossings = np.sort(x1[straddles] + t * (x2[straddles] - x1[straddles]))
        for lo, hi in crossings.reshape(-1, 2):
            # pixel centers in [lo, hi)
            x_start = max(int(np.ceil(lo - 0.5)), 0)
            x_stop = min(int(np.ceil(hi - 0.5)), width)
            if x_start < x_stop:
                out[y, x_start:x_stop] = True


def mask_subtract(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Pointwise a AND NOT b."""
    _check_same_dims(a, b)
    return BinaryMask(a.data & ~b.data, a.mpp)


def mask_intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Pointwise a AND b."""
    _check_same_dims(a, b)
    return BinaryMask(a.data & b.data, a.mpp)


def mask_union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_dims(a, b)
    return BinaryMask(a.data | b.data, a.mpp)


def _check_same_dims(a: BinaryMask, b: BinaryMask) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mask dimensions differ: {a.data.shape} vs {b.data.shape}")


@dataclass(frozen=True)
class TissueConfig:
    """Color-threshold tissue rule: not near-white and not neutral gray."""

    white_mean: float = 240.0
    min_spread: float = 10.0


def tissue_mask(img: RasterImage, cfg: TissueConfig = TissueConfig()) -> BinaryMask:
    """Pixel is tissue iff channel mean < white_mean and max-min spread > min_spread."""
    if img.channels != 3:
        raise ValueError(f"tissue detection needs a 3-channel image, got {img.channels}")
    data = img.data.astype(np.float64)
    mean = data.mean(axis=2)
    spread = data.max(axis=2) - data.min(axis=2)
    return BinaryMask((mean < cfg.white_mean) & (spread > cfg.min_spread), img.mpp)


# --------------------------------------------------------------------------- #
# GeoJSON annotation interchange
# --------------------------------------------------------------------------- #

def load_geojson(path: str | Path) -> AnnotationSet:
    """Read a FeatureCollection of Polygon features (first ring only).

    Each feature carries properties.classification.name in
    {Benign, InSitu, Exclude, Case} and an optional properties.case_id;
    coordinates are level-0 pixel positions.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read annotations from {path}: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise FormatError(f"{path}: expected a FeatureCollection, got {doc.get('type')!r}")
    polygons = []
    for i, feature in enumerate(doc.get("features", [])):
        props = feature.get("properties", {}) or {}
        name = (props.get("classification") or {}).get("name")
        if name not in _GEOJSON_NAMES:
            raise FormatError(
                f"{path}: feature {i} has classification {name!r}; "
                f"expected one of {sorted(_GEOJSON_NAMES)}"
            )
        geometry = feature.get("geometry") or {}
        if geometry.get("type") != "Polygon":
            raise FormatError(f"{path}: feature {i} geometry must be Polygon, got {geometry.get('type')!r}")
        rings = geometry.get("coordinates") or []
        if not rings:
            raise FormatError(f"{path}: feature {i} polygon has no rings")
        ring = np.asarray(rings[0], dtype=np.float64)
        # drop an explicit closing vertex
        if ring.shape[0] >= 2 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if ring.shape[0] < 3:
            raise FormatError(f"{path}: feature {i} polygon has fewer than 3 vertices")
        polygons.append(Polygon(_GEOJSON_NAMES[name], ring, case_id=props.get("case_id")))
    return AnnotationSet(tuple(polygons))


def save_geojson(ann: AnnotationSet, path: str | Path) -> None:
    features = []
    for poly in ann.polygons:
        props: dict = {"classification": {"name": _LABEL_NAMES[poly.label]}}
        if poly.case_id is not None:
            props["case_id"] = poly.case_id
        ring = poly.vertices.tolist()
        ring.append(ring[0])
        features.append(
            {
                "type": "Feature",
                "properties": props,
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")
