"""Turn a checkpoint into a standalone predictor executable.

The emitted script speaks the length-prefixed patch request/response
frames: it reads one request file, runs the checkpointed network, and
writes the class probability planes back.  Export refuses to hand over
an executable that fails its own round-trip check.
"""

from __future__ import annotations

import shutil
import stat
import sys
from pathlib import Path

import numpy as np

from restain import ExternalPredictor, PredictorError, RasterImage

from .errors import ExportError
from .train import load_checkpoint

_RUNNER = '''#!{python}
"""Patch predictor over a fixed checkpoint; argv: request-file response-file."""
import sys
from pathlib import Path

import numpy as np
import torch

from restain.protocol import read_request, write_response
from patchtrain.train import load_checkpoint

WEIGHTS = Path(__file__).resolve().parent / {weights!r}


def main() -> int:
    if len(sys.argv) != 3:
        print("usage: predictor REQUEST RESPONSE", file=sys.stderr)
        return 2
    torch.set_num_threads(1)  # bit-identical output across invocations
    model = load_checkpoint(WEIGHTS)
    arr = read_request(sys.argv[1])
    h, w = arr.shape[:2]
    d = model.cfg.divisor
    ph, pw = -h % d, -w % d
    if ph or pw:
        # grow to the grid the network needs; white reads as empty glass
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), constant_values=1.0)
    x = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        planes = model(x).final[0].permute(1, 2, 0).numpy()
    write_response(sys.argv[2], planes[:h, :w].astype(np.float32))
    return 0


if __name__ == "__main__":
    sys.exit(main())
'''


def verify_predictor(exe: str | Path, size: int, tolerance: float = 1e-4) -> None:
    """Round-trip an executable over the patch protocol.

    A constant mid-gray probe must come back as finite probability
    planes of the right shape, summing to one within tolerance, and two
    invocations must agree exactly.  Violations raise ExportError.
    """
    probe = RasterImage(np.full((size, size, 3), 128, dtype=np.uint8), 1.0)
    try:
        predictor = ExternalPredictor(exe)
        first = predictor.predict(probe)
        second = predictor.predict(probe)
    except PredictorError as exc:
        raise ExportError(f"exported predictor failed its round trip: {exc}") from exc
    if first.shape != (size, size, 4):
        raise ExportError(
            f"exported predictor returned shape {first.shape}, expected {(size, size, 4)}"
        )
    if not np.isfinite(first).all():
        raise ExportError("exported predictor returned non-finite probabilities")
    worst = float(np.abs(first.sum(axis=2) - 1.0).max())
    if worst > tolerance:
        raise ExportError(
            f"exported predictor planes sum to 1 within {worst:.2e}, tolerance {tolerance:.0e}"
        )
    if not np.array_equal(first, second):
        raise ExportError("exported predictor is not deterministic across invocations")


def export_predictor(checkpoint: str | Path, path: str | Path) -> Path:
    """Write an executable serving the checkpointed model, prove it on a
    round trip, and return its path.

    The weights land in a sibling file, so the pair can be relocated
    together.
    """
    model = load_checkpoint(checkpoint)  # validates the payload up front
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights = path.name + ".weights"
    shutil.copyfile(checkpoint, path.parent / weights)
    path.write_text(_RUNNER.format(python=sys.executable, weights=weights))
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    verify_predictor(path, model.cfg.input_size)
    return path
