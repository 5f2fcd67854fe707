"""Color deconvolution of CK-restained images and DAB thresholding.

RGB intensities are mapped to optical density (Beer-Lambert), unmixed
through a 3x3 stain matrix into hematoxylin / DAB / residual
concentrations, and the DAB channel is blurred and thresholded into a
preliminary epithelium mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ResolutionError
from .raster import BinaryMask, RasterImage

# H and DAB absorption vectors for brightfield H-DAB, Ruifrok-Johnston
# convention; rows are normalized on construction.
DEFAULT_HEMATOXYLIN = (0.65, 0.70, 0.29)
DEFAULT_DAB = (0.27, 0.57, 0.78)

_OD_MAX = float(np.log10(255.0))


@dataclass(frozen=True)
class StainMatrix:
    """Rows of unit-norm optical-density vectors: hematoxylin, DAB, residual."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got shape {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0):
            raise ValueError("stain matrix rows must be nonzero")
        rows = rows / norms[:, None]
        if not np.isfinite(np.linalg.cond(rows)) or abs(np.linalg.det(rows)) < 1e-9:
            raise ValueError("stain matrix is singular")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def hdab(cls, hematoxylin=DEFAULT_HEMATOXYLIN, dab=DEFAULT_DAB) -> "StainMatrix":
        """Standard H-DAB matrix; residual row is the normalized cross product."""
        h = np.asarray(hematoxylin, dtype=np.float64)
        d = np.asarray(dab, dtype=np.float64)
        residual = np.cross(h / np.linalg.norm(h), d / np.linalg.norm(d))
        return cls(np.stack([h, d, residual]))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.rows)


@dataclass(frozen=True)
class DeconvConfig:
    """Gaussian sigma (pixels), DAB OD cutoff, and the mpp they are defined at."""

    sigma: float = 3.0
    threshold: float = 0.25
    target_mpp: float = 0.3448

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if not self.target_mpp > 0:
            raise ValueError(f"target_mpp must be > 0, got {self.target_mpp}")


def rgb_to_od(img: RasterImage) -> np.ndarray:
    """Map 8-bit RGB to optical density: OD = -log10(max(I, 1) / 255).

    Intensities are floored at 1 so fully black pixels stay finite;
    output channels lie in [0, log10(255)].
    """
    if img.channels != 3:
        raise ValueError(f"optical density needs a 3-channel image, got {img.channels}")
    scaled = np.maximum(img.data.astype(np.float64), 1.0) / 255.0
    return -np.log10(scaled)


def deconvolve(od: np.ndarray, matrix: StainMatrix) -> np.ndarray:
    """Unmix an OD raster into (hematoxylin, DAB, residual) concentrations.

    Solves od = concentrations @ rows per pixel. Negative concentrations
    are preserved so thresholds act on raw values.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise ValueError(f"OD raster must be (h, w, 3), got shape {od.shape}")
    return od @ matrix.inverse


def compose_od(concentrations: np.ndarray, matrix: StainMatrix) -> np.ndarray:
    """Beer-Lambert forward map: concentrations to optical density."""
    return np.asarray(concentrations, dtype=np.float64) @ matrix.rows


def od_to_rgb_float(od: np.ndarray) -> np.ndarray:
    """Render OD back to unquantized RGB intensities in (0, 255]."""
    return 255.0 * np.power(10.0, -np.asarray(od, dtype=np.float64))


def compose_rgb(concentrations: np.ndarray, matrix: StainMatrix, mpp: float) -> RasterImage:
    """Render stain concentrations to an 8-bit RGB raster (round half-up)."""
    rgb = od_to_rgb_float(compose_od(concentrations, matrix))
    quantized = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    return RasterImage(quantized, mpp)


def dab_channel(ck_img: RasterImage, matrix: StainMatrix) -> np.ndarray:
    """Deconvolved DAB concentration channel of a CK-restained image."""
    return deconvolve(rgb_to_od(ck_img), matrix)[:, :, 1]


def dab_mask(ck_img: RasterImage, matrix: StainMatrix, cfg: DeconvConfig) -> BinaryMask:
    """Threshold the blurred DAB channel into an epithelium mask.

    The Gaussian prefilter uses cfg.sigma in pixels at cfg.target_mpp,
    kernel truncated at 4 sigma, reflected edges; mask is blurred >= threshold.
    The image must already be within 10% of the target mpp.
    """
    if abs(ck_img.mpp - cfg.target_mpp) > 0.1 * cfg.target_mpp:
        raise ResolutionError(
            f"image mpp {ck_img.mpp} is more than 10% away from the "
            f"thresholding mpp {cfg.target_mpp}; resample first"
        )
    channel = dab_channel(ck_img, matrix)
    if cfg.sigma > 0:
        channel = ndimage.gaussian_filter(channel, sigma=cfg.sigma, truncate=4.0, mode="reflect")
    return BinaryMask(channel >= cfg.threshold, ck_img.mpp)


def load_stain_matrix(path: str | Path) -> StainMatrix:
    """Read a 3x3 matrix from text, one row per line; an all-zero residual
    row is replaced by the cross product of the first two rows."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.replace(",", " ").split()])
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape != (3, 3):
        raise ValueError(f"stain matrix file {path} must hold 3 rows of 3 numbers, got {arr.shape}")
    if np.allclose(arr[2], 0.0):
        return StainMatrix.hdab(arr[0], arr[1])
    return StainMatrix(arr)
