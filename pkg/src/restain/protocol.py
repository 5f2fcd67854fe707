"""Binary request/response protocol for out-of-process predictors.

Request: magic PTCH, u32 version = 1, u32 height, width, channels = 3,
then height*width*3 float32 values in [0, 1], row-major, little endian.
Response: magic PRED, u32 version = 1, u32 height, width, planes = 4,
then float32 probabilities. The executable is invoked as
`<exe> <request-path> <response-path>`; a nonzero exit is an error.
"""

from __future__ import annotations

import struct
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, PredictorError
from .raster import N_CLASSES, RasterImage

REQUEST_MAGIC = b"PTCH"
RESPONSE_MAGIC = b"PRED"
PROTOCOL_VERSION = 1

_HEADER = struct.Struct("<4sIIII")


def write_request(path: str | Path, patch: RasterImage) -> None:
    if patch.channels != 3:
        raise ValueError("request patches must be RGB")
    payload = (patch.data.astype(np.float32) / 255.0).tobytes()
    header = _HEADER.pack(REQUEST_MAGIC, PROTOCOL_VERSION, patch.height, patch.width, 3)
    Path(path).write_bytes(header + payload)


def _read_frame(path: str | Path, magic: bytes, depth_name: str) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got_magic, version, height, width, depth = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != PROTOCOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + height * width * depth * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(height, width, depth)
    return data, depth


def read_request(path: str | Path) -> np.ndarray:
    """Float32 (height, width, 3) array in [0, 1]."""
    data, depth = _read_frame(path, REQUEST_MAGIC, "channels")
    if depth != 3:
        raise FormatError(f"{path}: request channels must be 3, got {depth}")
    return data


def write_response(path: str | Path, planes: np.ndarray) -> None:
    planes = np.asarray(planes, dtype=np.float32)
    if planes.ndim != 3 or planes.shape[2] != N_CLASSES:
        raise ValueError(f"response must be (h, w, {N_CLASSES}), got {planes.shape}")
    header = _HEADER.pack(
        RESPONSE_MAGIC, PROTOCOL_VERSION, planes.shape[0], planes.shape[1], N_CLASSES
    )
    Path(path).write_bytes(header + planes.astype("<f4").tobytes())


def read_response(path: str | Path) -> np.ndarray:
    """Float32 (height, width, 4) probability array."""
    data, depth = _read_frame(path, RESPONSE_MAGIC, "planes")
    if depth != N_CLASSES:
        raise FormatError(f"{path}: response planes must be {N_CLASSES}, got {depth}")
    return data


class ExternalPredictor:
    """Shells out to a predictor executable for every patch."""

    def __init__(self, exe: str | Path):
        self.exe = Path(exe)
        if not self.exe.exists():
            raise PredictorError(f"predictor executable not found: {self.exe}")

    def predict(self, patch: RasterImage) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="predictor-") as tmp:
            request = Path(tmp) / "request.ptch"
            response = Path(tmp) / "response.pred"
            write_request(request, patch)
            proc = subprocess.run(
                [str(self.exe), str(request), str(response)],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise PredictorError(
                    f"{self.exe} exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            try:
                planes = read_response(response)
            except FormatError as exc:
                raise PredictorError(f"malformed predictor response: {exc}") from exc
        if planes.shape[:2] != (patch.height, patch.width):
            raise PredictorError(
                f"predictor returned {planes.shape[:2]}, expected {(patch.height, patch.width)}"
            )
        return planes.astype(np.float64)
