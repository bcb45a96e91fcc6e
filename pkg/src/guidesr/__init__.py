"""Dual-branch one-step diffusion super-resolution at desk scale."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig, toy_model_config, toy_train_config  # noqa: E402
from .model import GuideSR, build_model  # noqa: E402

__all__ = ["GuideSR", "ModelConfig", "TrainConfig", "build_model", "toy_model_config", "toy_train_config"]
