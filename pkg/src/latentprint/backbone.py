"""Hybrid encoder: CNN trunk + spatial attention, windowed-attention branch, fusion head.

Shape chain for the full variant on a 224x224 input::

    3x224x224 -> trunk 1280x7x7 -> gated 1280x7x7 -> pooled 1280
              -> windowed-attention branch 768
              -> concat 2048 -> hidden 1024 -> embedding 512

The tiny variant keeps every interface but shrinks widths so tests can run
on a CPU without pretrained weights.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
from torchvision.models import efficientnet_b0, swin_t
from torchvision.models.swin_transformer import SwinTransformer

from .config import HybridEncoderConfig
from .errors import ShapeError

FULL_INPUT = 224
DOWNSAMPLE = 32


class Stages(NamedTuple):
    fmap: torch.Tensor
    amap: torch.Tensor | None
    gated: torch.Tensor
    local: torch.Tensor
    global_: torch.Tensor
    fused: torch.Tensor
    embedding: torch.Tensor


class SpatialAttention(nn.Module):
    """Per-location gate from a (channel-mean, channel-max) descriptor.

    One ``k x k`` convolution maps the 2-channel descriptor to a single
    pre-activation plane; a sigmoid turns it into weights in (0, 1) that
    multiply every channel of the input.
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        amap = torch.sigmoid(self.conv(desc))
        # floating-point sigmoid rounds to exactly 0 or 1 once saturated
        info = torch.finfo(amap.dtype)
        return amap.clamp(info.tiny, 1.0 - info.eps / 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        amap = self.attention_map(x)
        return x * amap, amap


class TinyTrunk(nn.Module):
    """Five stride-2 conv blocks (total stride 32) ending in ``out_channels`` maps."""

    def __init__(self, out_channels: int = 32):
        super().__init__()
        widths = [3, 16, 32, 48, 64, out_channels]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(_groups(cout), cout),
                nn.SiLU(),
            ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


def _groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _tiny_windowed_encoder(out_dim: int) -> SwinTransformer:
    """Two-stage shifted-window encoder; patch merging doubles width once."""
    net = SwinTransformer(
        patch_size=[4, 4],
        embed_dim=out_dim // 2,
        depths=[2, 2],
        num_heads=[2, 4],
        window_size=[4, 4],
        stochastic_depth_prob=0.0,
        num_classes=1,
    )
    net.head = nn.Identity()
    return net


def _full_trunk(load_pretrained: bool) -> nn.Module:
    weights = None
    if load_pretrained:
        from torchvision.models import EfficientNet_B0_Weights

        weights = EfficientNet_B0_Weights.IMAGENET1K_V1
    try:
        net = efficientnet_b0(weights=weights)
    except Exception as exc:  # download failures surface as URLError/RuntimeError
        raise RuntimeError(
            "could not load pretrained EfficientNet-B0 weights; "
            "set load_pretrained=False to build with random weights"
        ) from exc
    return net.features


def _full_windowed_encoder(load_pretrained: bool) -> nn.Module:
    weights = None
    if load_pretrained:
        from torchvision.models import Swin_T_Weights

        weights = Swin_T_Weights.IMAGENET1K_V1
    try:
        net = swin_t(weights=weights)
    except Exception as exc:
        raise RuntimeError(
            "could not load pretrained Swin-T weights; "
            "set load_pretrained=False to build with random weights"
        ) from exc
    net.head = nn.Identity()
    return net


class HybridEncoder(nn.Module):
    def __init__(self, cfg: HybridEncoderConfig, use_attention: bool = True, use_transformer: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_attention = use_attention
        self.use_transformer = use_transformer
        if cfg.backbone_variant == "pretrained_full":
            self.cnn = _full_trunk(cfg.load_pretrained)
            self.transformer = _full_windowed_encoder(cfg.load_pretrained)
        else:
            self.cnn = TinyTrunk(cfg.cnn_channels)
            self.transformer = _tiny_windowed_encoder(cfg.transformer_dim)
        self.attention = SpatialAttention(cfg.attention_kernel)
        self.head = nn.Sequential(
            nn.Linear(cfg.cnn_channels + cfg.transformer_dim, cfg.hidden_dim),
            nn.ReLU(),
            nn.Dropout(cfg.dropout_rate),
            nn.Linear(cfg.hidden_dim, cfg.embedding_dim),
        )
        for p in list(self.attention.parameters()) + list(self.head.parameters()):
            if p.dim() > 1:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
            else:
                nn.init.zeros_(p)
        if cfg.freeze_backbones:
            for p in list(self.cnn.parameters()) + list(self.transformer.parameters()):
                p.requires_grad_(False)

    # -- input validation ---------------------------------------------------

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, S, S) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h != w:
            raise ShapeError(f"input must be square, got {h}x{w}")
        if self.cfg.backbone_variant == "pretrained_full":
            if h != FULL_INPUT:
                raise ShapeError(f"full variant expects {FULL_INPUT}x{FULL_INPUT}, got {h}x{w}")
        elif h % DOWNSAMPLE or h < DOWNSAMPLE:
            raise ShapeError(f"tiny variant needs a side that is a multiple of {DOWNSAMPLE}, got {h}")
        return x

    # -- branches -------------------------------------------------------------

    def cnn_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.cnn(self.check_input(x))

    def spatial_attention(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.attention(fmap)

    @staticmethod
    def pool_local(gated: torch.Tensor) -> torch.Tensor:
        return gated.mean(dim=(-2, -1))

    def transformer_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.transformer(self.check_input(x))

    def fuse_and_project(self, local: torch.Tensor, global_: torch.Tensor, training_mode: bool | None = None) -> torch.Tensor:
        if local.shape[-1] != self.cfg.cnn_channels:
            raise ShapeError(f"local vector has length {local.shape[-1]}, expected {self.cfg.cnn_channels}")
        if global_.shape[-1] != self.cfg.transformer_dim:
            raise ShapeError(f"global vector has length {global_.shape[-1]}, expected {self.cfg.transformer_dim}")
        fused = torch.cat([local, global_], dim=-1)
        if training_mode is None:
            return self.head(fused)
        lin1, act, drop, lin2 = self.head
        h = act(lin1(fused))
        if training_mode and drop.p > 0:
            h = nn.functional.dropout(h, drop.p, training=True)
        return lin2(h)

    # -- composition ------------------------------------------------------------

    def stages(self, x: torch.Tensor, use_attention: bool | None = None, use_transformer: bool | None = None) -> Stages:
        use_attention = self.use_attention if use_attention is None else use_attention
        use_transformer = self.use_transformer if use_transformer is None else use_transformer
        x = self.check_input(x)
        fmap = self.cnn(x)
        if use_attention:
            gated, amap = self.attention(fmap)
        else:
            gated, amap = fmap, None
        local = self.pool_local(gated)
        if use_transformer:
            global_ = self.transformer(x)
        else:
            global_ = local.new_zeros(local.shape[0], self.cfg.transformer_dim)
        fused = torch.cat([local, global_], dim=-1)
        embedding = self.fuse_and_project(local, global_)
        return Stages(fmap, amap, gated, local, global_, fused, embedding)

    def forward(self, x: torch.Tensor, use_attention: bool | None = None, use_transformer: bool | None = None) -> torch.Tensor:
        return self.stages(x, use_attention, use_transformer).embedding


def build_encoder(cfg: HybridEncoderConfig, use_attention: bool = True, use_transformer: bool = True) -> HybridEncoder:
    """Construct an encoder with reproducible initialization from ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = HybridEncoder(cfg, use_attention, use_transformer)
    return model


@torch.no_grad()
def encode(model: HybridEncoder, inputs: torch.Tensor, use_attention: bool | None = None,
           use_transformer: bool | None = None, batch_size: int = 32) -> torch.Tensor:
    """Inference-mode embeddings (unnormalized) for a batch of model inputs."""
    was_training = model.training
    model.eval()
    try:
        if inputs.dim() == 3:
            inputs = inputs.unsqueeze(0)
        chunks = [model(inputs[i:i + batch_size], use_attention, use_transformer)
                  for i in range(0, inputs.shape[0], batch_size)]
        return torch.cat(chunks, dim=0)
    finally:
        model.train(was_training)
