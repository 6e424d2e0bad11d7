"""End-to-end composition used by the CLI and the experiment scripts."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import HybridEncoder, build_encoder, encode
from .config import ArcFaceConfig, AugmentationPolicy, HybridEncoderConfig, PreprocessConfig, TrainConfig
from .errors import ConfigError, DatasetError, LatentPrintError
from .imaging import enhance, load_image, load_mask, to_model_input
from .matching import CMCCurve, EmbeddingRecord, GalleryIndex, cmc
from .protocol import ExperimentSpec, SampleRecord, ablation_grid, resolve_path
from .training import TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class LoadedInputs:
    tensors: torch.Tensor
    records: list[SampleRecord]
    excluded: list[tuple[str, str]] = field(default_factory=list)


def load_model_inputs(records: Sequence[SampleRecord], manifest_path, input_size: int,
                      preprocess_cfg: PreprocessConfig | None = None, mask_dir=None) -> LoadedInputs:
    """Load images into model inputs; unreadable or unsegmentable samples are excluded.

    With ``preprocess_cfg`` the full enhancement pipeline runs first;
    otherwise the images are assumed to be preprocessed already.
    """
    tensors, kept, excluded = [], [], []
    for rec in records:
        try:
            img = load_image(resolve_path(rec, manifest_path))
            if preprocess_cfg is not None:
                mask = None
                if mask_dir is not None:
                    mpath = Path(mask_dir) / f"{rec.sample_id}.png"
                    if mpath.exists():
                        mask = load_mask(mpath, img.shape)
                img = enhance(img, preprocess_cfg, mask)
            tensors.append(to_model_input(img, input_size))
            kept.append(rec)
        except (OSError, LatentPrintError, ValueError) as exc:
            log.warning("excluding %s: %s", rec.sample_id, exc)
            excluded.append((rec.sample_id, f"{type(exc).__name__}: {exc}"))
    stacked = torch.stack(tensors) if tensors else torch.empty(0, 3, input_size, input_size)
    return LoadedInputs(stacked, kept, excluded)


def class_index(records: Sequence[SampleRecord]) -> list[str]:
    """Identity labels in first-appearance order."""
    return list(dict.fromkeys(r.identity_id for r in records))


def train_on_records(model: HybridEncoder, loaded: LoadedInputs, train_cfg: TrainConfig,
                     arcface_overrides: dict | None = None, policy: AugmentationPolicy = AugmentationPolicy(),
                     checkpoint_dir=None, log_path=None, input_size: int | None = None,
                     verbose: bool = False) -> tuple[TrainResult, list[str]]:
    if not loaded.records:
        raise DatasetError("no training samples")
    classes = class_index(loaded.records)
    pos = {c: i for i, c in enumerate(classes)}
    labels = np.array([pos[r.identity_id] for r in loaded.records])
    arc = ArcFaceConfig(num_classes=len(classes), **(arcface_overrides or {}))
    meta = {"classes": classes, "input_size": int(input_size or loaded.tensors.shape[-1])}
    result = train(model, loaded.tensors, labels, train_cfg, arc, policy, checkpoint_dir, log_path,
                   extra_metadata=meta, verbose=verbose)
    return result, classes


def embed_loaded(model: HybridEncoder, loaded: LoadedInputs) -> list[EmbeddingRecord]:
    if not loaded.records:
        return []
    vectors = encode(model, loaded.tensors).double().numpy()
    return [EmbeddingRecord(r.sample_id, r.identity_id, v) for r, v in zip(loaded.records, vectors)]


def evaluate_split(embeddings: Sequence[EmbeddingRecord], gallery_ids: Sequence[str], probe_ids: Sequence[str],
                   max_rank: int = 10) -> CMCCurve:
    """CMC for the given gallery/probe sample ids; probes without an embedding count as excluded.

    ``max_rank`` is capped at the number of enrolled identities.
    """
    by_id = {e.id: e for e in embeddings}
    gallery = [by_id[i] for i in gallery_ids if i in by_id]
    if not gallery:
        raise ConfigError("no gallery embeddings available")
    index = GalleryIndex.from_records(gallery)
    probes = [(by_id[i].vector, by_id[i].identity, i) for i in probe_ids if i in by_id]
    excluded = sum(1 for i in probe_ids if i not in by_id)
    return cmc(probes, index, min(max_rank, index.n_identities), n_excluded=excluded)


@dataclass
class AblationRow:
    name: str
    use_attention: bool
    use_transformer: bool
    curve: CMCCurve

    def rank_n(self, n: int = 10) -> float:
        return self.curve[min(n, max(self.curve.ranks))]


def run_ablation(spec: ExperimentSpec, manifest_path, encoder_cfg: HybridEncoderConfig, train_cfg: TrainConfig,
                 arcface_overrides: dict | None = None, policy: AugmentationPolicy = AugmentationPolicy(),
                 input_size: int = 64, preprocess_cfg: PreprocessConfig | None = None, out_dir=None,
                 verbose: bool = False) -> list[AblationRow]:
    """Train, embed and score each ablation variant under identical seeds and data."""
    train_in = load_model_inputs(spec.train, manifest_path, input_size, preprocess_cfg)
    eval_records = list(dict.fromkeys(spec.gallery + spec.probes))
    eval_in = load_model_inputs(eval_records, manifest_path, input_size, preprocess_cfg)
    rows = []
    for name, use_attention, use_transformer in ablation_grid():
        model = build_encoder(encoder_cfg, use_attention, use_transformer)
        ckpt = Path(out_dir) / f"checkpoint_{name.replace('+', '_')}" if out_dir is not None else None
        train_on_records(model, train_in, train_cfg, arcface_overrides, policy, ckpt,
                         input_size=input_size, verbose=verbose)
        emb = embed_loaded(model, eval_in)
        curve = evaluate_split(emb, [r.sample_id for r in spec.gallery], [r.sample_id for r in spec.probes],
                               max(spec.ranks))
        rows.append(AblationRow(name, use_attention, use_transformer, curve))
    return rows
