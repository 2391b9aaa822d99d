"""Mask post-processing with a learned per-frame scalar for ASR frontends."""

from .autodiff import Tensor, backward, grad_check, no_grad, stop_gradient
from .config import ExperimentConfig, build_config, load_config
from .features import ConfigError, FeatureConfig
from .masks import apply_mask, ideal_ratio_mask, postprocess
from .model import ModelConfig, frontend_forward, init_params

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "FeatureConfig",
    "ModelConfig",
    "Tensor",
    "apply_mask",
    "backward",
    "build_config",
    "frontend_forward",
    "grad_check",
    "ideal_ratio_mask",
    "init_params",
    "load_config",
    "no_grad",
    "postprocess",
    "stop_gradient",
]
