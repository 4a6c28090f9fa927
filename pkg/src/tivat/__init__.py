"""Multivariate forecaster with joint time/variate attention over patch tokens."""

from .model import ModelConfig, TiVaT, forward, load_checkpoint, loss_mse, save_checkpoint
from .tensorcore import Tensor, backward, no_grad

__all__ = [
    "ModelConfig",
    "TiVaT",
    "Tensor",
    "backward",
    "forward",
    "load_checkpoint",
    "loss_mse",
    "no_grad",
    "save_checkpoint",
]

__version__ = "0.1.0"
