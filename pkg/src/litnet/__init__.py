"""Lightweight underwater image enhancement and super-resolution on numpy."""

from .core import GradientTape, ShapeError, Tensor
from .losses import LossConfig, total_loss
from .model import ConfigError, LitNet, ModelConfig, count_flops, count_params, predict

__all__ = [
    "ConfigError", "GradientTape", "LitNet", "LossConfig", "ModelConfig", "ShapeError", "Tensor",
    "count_flops", "count_params", "predict", "total_loss",
]
__version__ = "0.1.0"
