import numpy as np
import pytest
from restain import LabelMask, RasterImage, ShiftVector, assign_set
from restain.dataset import PatchOrigin, PatchRecord

# color per class; strongly separated channels so a small net can fit them
CLASS_RGB = {
    0: (232, 208, 218),
    1: (148, 108, 170),
    2: (95, 165, 120),
    3: (70, 90, 160),
}

# which classes each toy patch contains; indices 0-2 carry in-situ, 3-5
# benign without in-situ, 6-7 only other epithelium
PLANS = ([3], [3, 1], [3, 2], [2], [2, 1], [2], [1], [1, 1])


def _toy_patch(idx: int, size: int = 128) -> PatchRecord:
    rng = np.random.default_rng([77, idx, size])
    gt = np.zeros((size, size), np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = max(8, size // 8), size // 4 + 1
    for cls in PLANS[idx]:
        r = int(rng.integers(lo, hi))
        cy = int(rng.integers(r, size - r))
        cx = int(rng.integers(r, size - r))
        gt[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    rgb = np.zeros((size, size, 3), np.float32)
    for cls, color in CLASS_RGB.items():
        rgb[gt == cls] = color
    rgb += rng.normal(0.0, 5.0, rgb.shape)
    he = RasterImage(np.clip(rgb + 0.5, 0, 255).astype(np.uint8), 0.3448)
    mask = LabelMask(gt, 0.3448)
    return PatchRecord(
        he=he,
        gt=mask,
        set_tag=assign_set(mask),
        origin=PatchOrigin("toy", idx, 0, 0, 1),
        shift_applied=ShiftVector(0, 0),
        tissue_fraction=1.0,
    )


@pytest.fixture(scope="session")
def make_patch():
    """Factory for deterministic class-colored toy patches."""
    return _toy_patch


@pytest.fixture(scope="session")
def bucket_by_set():
    def _bucket(records):
        sets = {"insitu": [], "benign": [], "invasive": []}
        for rec in records:
            sets[rec.set_tag].append(rec)
        return sets

    return _bucket


@pytest.fixture(scope="session")
def class_palette():
    return dict(CLASS_RGB)
