"""Bilateral-branch network for collaborative camouflaged object detection."""

from .core import BBNetError, ConfigError, Dims, DimsError, ModelConfig, ShapeError, TrainConfig, load_config
from .losses import LossTerms, total_loss
from .metrics import MetricReport, evaluate_arrays, evaluate_dirs
from .network import BBNet, ForwardOutput, load_checkpoint, model_summary, save_checkpoint, state_hash

__all__ = [
    "BBNet",
    "BBNetError",
    "ConfigError",
    "Dims",
    "DimsError",
    "ForwardOutput",
    "LossTerms",
    "MetricReport",
    "ModelConfig",
    "ShapeError",
    "TrainConfig",
    "evaluate_arrays",
    "evaluate_dirs",
    "load_checkpoint",
    "load_config",
    "model_summary",
    "save_checkpoint",
    "state_hash",
    "total_loss",
]
