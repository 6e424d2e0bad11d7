"""Latent fingerprint identification with a hybrid CNN / windowed-attention encoder."""

from .config import (
    ArcFaceConfig,
    AugmentationPolicy,
    HybridEncoderConfig,
    PreprocessConfig,
    TrainConfig,
)

__all__ = [
    "ArcFaceConfig",
    "AugmentationPolicy",
    "HybridEncoderConfig",
    "PreprocessConfig",
    "TrainConfig",
]
__version__ = "0.1.0"
