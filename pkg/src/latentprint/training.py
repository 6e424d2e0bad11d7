"""ArcFace training: angular-margin logits, loss, augmentation and the Adam loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .backbone import HybridEncoder
from .checkpoint import save_checkpoint
from .config import ArcFaceConfig, AugmentationPolicy, TrainConfig
from .errors import DatasetError, DegenerateInputError

SIN2_FLOOR = 1e-12
LOG_HEADER = ["epoch", "mean_loss", "wall_seconds"]


def arcface_logits(embeddings: torch.Tensor, labels, class_weights: torch.Tensor,
                   margin: float = 0.5, scale: float = 64.0) -> torch.Tensor:
    """Scaled cosine logits with an additive angular margin on the true class.

    Non-target classes get ``s * cos(theta_j)``; the target gets
    ``s * cos(theta_y + m)``, or the linear surrogate ``s * (cos(theta_y) - m sin m)``
    once ``theta_y + m`` passes pi. ``cos(theta_y + m)`` is expanded as
    ``cos t cos m - sin t sin m`` with ``sin^2 t`` floored at a tiny positive
    value, which keeps gradients finite at ``cos t = +-1`` without shifting
    the angle of a perfectly aligned embedding.
    """
    single = embeddings.dim() == 1
    if single:
        embeddings = embeddings.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device).reshape(-1)
    if labels.shape[0] != embeddings.shape[0]:
        raise ValueError("one label per embedding required")
    if not torch.isfinite(embeddings).all():
        raise DegenerateInputError("embedding contains non-finite values")
    norms = embeddings.norm(dim=1)
    if (norms == 0).any():
        raise DegenerateInputError("zero-norm embedding")
    num_classes = class_weights.shape[0]
    if (labels < 0).any() or (labels >= num_classes).any():
        raise ValueError(f"labels must lie in [0, {num_classes})")

    emb = embeddings / norms.unsqueeze(1)
    w = F.normalize(class_weights, dim=1)
    cos = (emb @ w.t()).clamp(-1.0, 1.0)

    target_cos = cos.gather(1, labels.unsqueeze(1)).squeeze(1)
    sin_t = torch.sqrt((1.0 - target_cos * target_cos).clamp_min(SIN2_FLOOR))
    with_margin = torch.where(
        target_cos >= -math.cos(margin),  # theta + m <= pi
        target_cos * math.cos(margin) - sin_t * math.sin(margin),
        target_cos - margin * math.sin(margin),
    )
    one_hot = F.one_hot(labels, num_classes).to(cos.dtype)
    logits = scale * (cos + one_hot * (with_margin - target_cos).unsqueeze(1))
    return logits[0] if single else logits


def arcface_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# augmentation

def _gaussian_blur(x: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    if kernel <= 1:
        return x
    r = kernel // 2
    t = torch.arange(-r, r + 1, dtype=x.dtype)
    k1 = torch.exp(-(t * t) / (2.0 * sigma * sigma))
    k1 = k1 / k1.sum()
    c = x.shape[0]
    y = x.unsqueeze(0)
    y = F.pad(y, (r, r, r, r), mode="reflect")
    y = F.conv2d(y, k1.view(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    y = F.conv2d(y, k1.view(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)
    return y[0]


def augment(x: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator,
            force_flip: bool | None = None) -> torch.Tensor:
    """Rotate, flip, jitter brightness/contrast, blur. Deterministic given ``rng``.

    Four draws are taken from ``rng`` on every call regardless of the policy,
    so the random stream does not depend on which steps are active.
    """
    angle_u, flip_u, bright_u, contrast_u = rng.random(4)
    angle = (2.0 * angle_u - 1.0) * policy.rotation_deg
    delta = policy.brightness_contrast_delta
    brightness = (2.0 * bright_u - 1.0) * delta
    contrast = 1.0 + (2.0 * contrast_u - 1.0) * delta
    flip = flip_u < policy.hflip_prob if force_flip is None else force_flip

    out = x
    if angle != 0.0:
        out = TF.rotate(out, float(angle), interpolation=TF.InterpolationMode.BILINEAR,
                        fill=[-1.0] * out.shape[0])
    if flip:
        out = out.flip(-1)
    if delta > 0:
        out = (out * contrast + brightness).clamp(-1.0, 1.0)
    out = _gaussian_blur(out, policy.blur_kernel, policy.blur_sigma)
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: HybridEncoder
    class_weights: torch.Tensor
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    checkpoint: Path | None = None


def init_class_weights(num_classes: int, dim: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed + 1)
    return torch.randn(num_classes, dim, generator=gen) * 0.01


def _append_log(path: Path, epoch: int, loss: float, seconds: float) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_HEADER)
        writer.writerow([epoch, f"{loss:.6f}", f"{seconds:.3f}"])


def train(model: HybridEncoder, inputs: torch.Tensor, labels, train_cfg: TrainConfig,
          arcface_cfg: ArcFaceConfig, policy: AugmentationPolicy = AugmentationPolicy(),
          checkpoint_dir: str | Path | None = None, log_path: str | Path | None = None,
          extra_metadata: dict | None = None, verbose: bool = False) -> TrainResult:
    """Train ``model`` end to end with ArcFace; returns the trained model and class weights."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    n = int(labels.shape[0])
    if inputs.shape[0] != n:
        raise DatasetError(f"{inputs.shape[0]} inputs but {n} labels")
    bad = ((labels < 0) | (labels >= arcface_cfg.num_classes)).nonzero().flatten().tolist()
    if bad:
        raise DatasetError(f"labels out of range [0, {arcface_cfg.num_classes}) at indices {bad[:10]}")
    missing = sorted(set(range(arcface_cfg.num_classes)) - set(labels.tolist()))
    if n and missing:
        raise DatasetError(f"classes without samples: {missing[:10]}")

    weights = init_class_weights(arcface_cfg.num_classes, model.cfg.embedding_dim, train_cfg.seed)
    weights = torch.nn.Parameter(weights)
    params = [p for p in model.parameters() if p.requires_grad] + [weights]
    opt = torch.optim.Adam(params, lr=train_cfg.learning_rate, betas=(0.9, 0.999),
                           weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(model=model, class_weights=weights.data)
    log_path = Path(log_path) if log_path is not None else None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_cfg.seed)
        for epoch in range(1, train_cfg.epochs + 1):
            start = time.perf_counter()
            model.train()
            order = rng.permutation(n)
            total = 0.0
            for i in range(0, n, train_cfg.batch_size):
                idx = order[i:i + train_cfg.batch_size]
                batch = torch.stack([augment(inputs[j], policy, rng) for j in idx])
                target = labels[idx]
                logits = arcface_logits(model(batch), target, weights,
                                        arcface_cfg.margin_m, arcface_cfg.scale_s)
                loss = arcface_loss(logits, target)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                result.steps += 1
            mean_loss = total / max(n, 1)
            result.epoch_losses.append(mean_loss)
            elapsed = time.perf_counter() - start
            if log_path is not None:
                _append_log(log_path, epoch, mean_loss, elapsed)
            if verbose:
                print(f"epoch {epoch:3d}  loss {mean_loss:.4f}  ({elapsed:.1f}s)")
    model.eval()

    if checkpoint_dir is not None:
        meta = {
            "train_config": asdict(train_cfg),
            "arcface": asdict(arcface_cfg),
            "augmentation": asdict(policy),
            "epoch_losses": [round(x, 8) for x in result.epoch_losses],
        }
        meta.update(extra_metadata or {})
        result.checkpoint = save_checkpoint(checkpoint_dir, model, result.steps,
                                            {"arcface.weight": weights.data}, meta)
    return result
