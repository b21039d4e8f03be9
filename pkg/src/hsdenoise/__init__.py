"""Trainable two-layer spectral-spatial sparse coding for hyperspectral denoising."""

__version__ = "0.1.0"

from .hsio import HsiCube, read_hsr, write_hsr
from .model import DenoisingModel, ModelConfig
from .noise import NoiseSpec, apply_noise
from .training import TrainConfig, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "HsiCube",
    "read_hsr",
    "write_hsr",
    "DenoisingModel",
    "ModelConfig",
    "NoiseSpec",
    "apply_noise",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
]
