"""Checkpoint directory format.

A checkpoint is a directory holding::

    metadata.json   config echo, variant, seed, training step, extra fields
    index.json      parameter name -> {"shape", "offset", "dtype"}
    params.bin      concatenated little-endian float32 arrays

Offsets are in bytes. Integer buffers are stored as float32 and cast back
to their recorded dtype on load. Writes go to a temporary sibling directory
that is renamed into place.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from .backbone import HybridEncoder, build_encoder
from .config import HybridEncoderConfig

METADATA = "metadata.json"
INDEX = "index.json"
PARAMS = "params.bin"
LE_FLOAT32 = np.dtype("<f4")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_tensors(path: str | os.PathLike, tensors: dict[str, torch.Tensor], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        index = {}
        offset = 0
        with open(tmp / PARAMS, "wb") as fh:
            for name, t in tensors.items():
                arr = t.detach().cpu().numpy().astype(LE_FLOAT32, copy=False)
                raw = np.ascontiguousarray(arr).tobytes()
                index[name] = {"shape": list(arr.shape), "offset": offset, "dtype": str(t.dtype).replace("torch.", "")}
                fh.write(raw)
                offset += len(raw)
        (tmp / INDEX).write_text(_dumps(index), encoding="utf-8")
        (tmp / METADATA).write_text(_dumps(metadata), encoding="utf-8")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    index = json.loads((path / INDEX).read_text(encoding="utf-8"))
    metadata = json.loads((path / METADATA).read_text(encoding="utf-8"))
    blob = (path / PARAMS).read_bytes()
    tensors = {}
    for name, entry in index.items():
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=LE_FLOAT32, count=count, offset=entry["offset"]).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        tensors[name] = t.to(getattr(torch, entry["dtype"]))
    return tensors, metadata


def save_checkpoint(path, model: HybridEncoder, step: int = 0, extra_tensors: dict | None = None,
                    extra_metadata: dict | None = None) -> Path:
    tensors = {f"encoder.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    meta = {
        "config": dict(vars(model.cfg)),
        "variant": model.cfg.backbone_variant,
        "seed": model.cfg.seed,
        "step": int(step),
        "use_attention": model.use_attention,
        "use_transformer": model.use_transformer,
    }
    meta.update(extra_metadata or {})
    return save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[HybridEncoder, dict[str, torch.Tensor], dict]:
    """Rebuild the encoder from a checkpoint; returns (model, non-encoder tensors, metadata)."""
    tensors, meta = load_tensors(path)
    cfg_fields = dict(meta["config"])
    cfg_fields["load_pretrained"] = False  # weights come from the checkpoint
    cfg = HybridEncoderConfig(**cfg_fields)
    model = build_encoder(cfg, meta.get("use_attention", True), meta.get("use_transformer", True))
    state = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    model.load_state_dict(state)
    model.eval()
    extras = {k: v for k, v in tensors.items() if not k.startswith("encoder.")}
    return model, extras, meta
