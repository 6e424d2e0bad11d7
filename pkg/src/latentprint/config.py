"""Dataclass configs and the flat ``key = value`` config-file format.

Every config here defaults to the reference training setup
(ArcFace m=0.5, s=64, Adam lr 1e-4, wd 1e-5, batch 16, 224 px inputs).
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

VARIANTS = ("pretrained_full", "tiny_test")


@dataclass(frozen=True)
class PreprocessConfig:
    block_size: int = 16
    gabor_frequency: float = 1.0 / 9.0
    threshold_window: int = 15
    threshold_offset: float = 2.0
    # fraction of the global image variance a block must exceed to count as foreground
    variance_threshold: float = 0.1
    target_mean: float = 128.0
    target_var: float = 2500.0
    input_size: int = 224

    def __post_init__(self):
        if self.block_size < 4:
            raise ConfigError(f"block_size must be >= 4, got {self.block_size}")
        if self.gabor_frequency <= 0:
            raise ConfigError("gabor_frequency must be positive")
        if self.threshold_window < 3 or self.threshold_window % 2 == 0:
            raise ConfigError("threshold_window must be odd and >= 3")
        if self.variance_threshold < 0:
            raise ConfigError("variance_threshold must be non-negative")
        if self.target_var <= 0:
            raise ConfigError("target_var must be positive")
        if self.input_size < 32:
            raise ConfigError("input_size must be >= 32")


@dataclass(frozen=True)
class HybridEncoderConfig:
    cnn_channels: int = 1280
    transformer_dim: int = 768
    embedding_dim: int = 512
    attention_kernel: int = 7
    dropout_rate: float = 0.5
    backbone_variant: str = "pretrained_full"
    hidden_dim: int = 1024
    load_pretrained: bool = True
    freeze_backbones: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("cnn_channels", "transformer_dim", "embedding_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.attention_kernel % 2 == 0 or self.attention_kernel < 1:
            raise ConfigError("attention_kernel must be a positive odd integer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.backbone_variant not in VARIANTS:
            raise ConfigError(f"unknown backbone_variant {self.backbone_variant!r}")
        if self.backbone_variant == "pretrained_full" and (
            self.cnn_channels != 1280 or self.transformer_dim != 768
        ):
            raise ConfigError("pretrained_full fixes cnn_channels=1280 and transformer_dim=768")
        if self.backbone_variant == "tiny_test" and self.transformer_dim % 2:
            raise ConfigError("tiny_test transformer_dim must be even (two stages)")

    @classmethod
    def tiny(cls, **overrides) -> "HybridEncoderConfig":
        base = dict(
            cnn_channels=32,
            transformer_dim=48,
            embedding_dim=512,
            hidden_dim=256,
            backbone_variant="tiny_test",
            load_pretrained=False,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class ArcFaceConfig:
    num_classes: int
    margin_m: float = 0.5
    scale_s: float = 64.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if not 0.0 <= self.margin_m < math.pi:
            raise ConfigError("margin_m must lie in [0, pi)")
        if self.scale_s <= 0:
            raise ConfigError("scale_s must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_deg: float = 15.0
    hflip_prob: float = 0.5
    brightness_contrast_delta: float = 0.1
    blur_kernel: int = 3
    blur_sigma: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must lie in [0, 1]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be odd")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(rotation_deg=0.0, hflip_prob=0.0, brightness_contrast_delta=0.0, blur_kernel=1)


# ---------------------------------------------------------------------------
# flat key-value files

def parse_kv_file(path: str | os.PathLike) -> dict[str, str]:
    """Read ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, target: Any, key: str):
    try:
        if isinstance(target, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(target, int):
            return int(value)
        if isinstance(target, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return value


def preprocess_config_from_kv(kv: dict[str, str]) -> PreprocessConfig:
    defaults = PreprocessConfig()
    known = {f.name for f in fields(PreprocessConfig)}
    unknown = set(kv) - known
    if unknown:
        raise ConfigError(f"unknown preprocessing keys: {sorted(unknown)}")
    updates = {k: _coerce(v, getattr(defaults, k), k) for k, v in kv.items()}
    return dataclasses.replace(defaults, **updates)


# training file keys -> (config object, attribute)
TRAIN_KEYS = {
    "lr": ("train", "learning_rate"),
    "weight_decay": ("train", "weight_decay"),
    "batch_size": ("train", "batch_size"),
    "epochs": ("train", "epochs"),
    "seed": ("train", "seed"),
    "margin": ("arcface", "margin_m"),
    "scale": ("arcface", "scale_s"),
    "variant": ("encoder", "backbone_variant"),
}


@dataclass
class TrainingFileConfig:
    """Parsed training config file: partial overrides for each config object."""

    train: dict[str, Any] = field(default_factory=dict)
    arcface: dict[str, Any] = field(default_factory=dict)
    encoder: dict[str, Any] = field(default_factory=dict)


def training_config_from_kv(kv: dict[str, str]) -> TrainingFileConfig:
    unknown = set(kv) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    out = TrainingFileConfig()
    samples = {"train": TrainConfig(), "arcface": ArcFaceConfig(num_classes=1), "encoder": HybridEncoderConfig()}
    for key, value in kv.items():
        section, attr = TRAIN_KEYS[key]
        getattr(out, section)[attr] = _coerce(value, getattr(samples[section], attr), key)
    return out


def env_seed(default: int) -> int:
    """``LPF_SEED`` overrides any configured seed."""
    raw = os.environ.get("LPF_SEED")
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LPF_SEED must be an integer, got {raw!r}") from None


def as_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
