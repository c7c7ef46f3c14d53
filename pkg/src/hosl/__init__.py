"""Hybrid-order split learning: a zeroth-order client and a first-order server."""

from .model import LayerSpec, SplitModel, build_feature_split, build_split_model
from .roles import TrainingConfig, TrainLog, run_training

__all__ = [
    "LayerSpec",
    "SplitModel",
    "TrainLog",
    "TrainingConfig",
    "build_feature_split",
    "build_split_model",
    "run_training",
]
