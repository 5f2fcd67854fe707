"""Desk-scale training for the patch segmentation network.

Fits an attention-gated U-Net over a patch store, tracks validation
loss for rate decay and early stopping, and exports the trained model
as an executable speaking the patch request/response protocol.
"""

from .errors import ExportError, TrainerError
from .export import export_predictor, verify_predictor
from .losses import dice_loss, dice_scores, supervision_loss
from .model import AguNet, NetworkConfig, NetworkOutput, build_network
from .schedule import PlateauSchedule
from .train import (
    TrainConfig,
    TrainResult,
    batch_tensors,
    load_checkpoint,
    load_sets,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
