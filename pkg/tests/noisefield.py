"""Low-frequency random rasters shared by the registration fixtures."""

from __future__ import annotations

import numpy as np


def smooth_noise(rng: np.random.Generator, h: int, w: int, blur: int = 5) -> np.ndarray:
    """Low-frequency random field in [0, 255] for registration fixtures."""
    from scipy import ndimage

    field = ndimage.uniform_filter(rng.random((h, w)), size=blur, mode="wrap")
    lo, hi = field.min(), field.max()
    return np.floor((field - lo) / (hi - lo + 1e-12) * 255.0 + 0.5).astype(np.uint8)
