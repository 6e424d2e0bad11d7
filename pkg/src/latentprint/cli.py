"""Command-line entry points.

Every command writes its outputs under ``--out-dir`` together with a
``run.json`` echo of the effective configuration. ``LPF_SEED`` overrides
any configured seed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import protocol
from .checkpoint import load_checkpoint
from .config import (
    VARIANTS,
    AugmentationPolicy,
    HybridEncoderConfig,
    PreprocessConfig,
    TrainConfig,
    env_seed,
    parse_kv_file,
    preprocess_config_from_kv,
    training_config_from_kv,
)
from .backbone import build_encoder
from .errors import ClosedSetError, ConfigError, LatentPrintError
from .imaging import enhance, load_image, load_mask, save_image
from .matching import (
    GalleryIndex,
    ScoreMatrix,
    compare_systems,
    identify,
    read_embeddings,
    read_score_matrix,
    write_cmc_csv,
    write_embeddings,
    write_score_matrix,
    write_table_csv,
)
from .pipeline import embed_loaded, evaluate_split, load_model_inputs, run_ablation, train_on_records
from .synthetic import make_corpus

log = logging.getLogger("latentprint")


class CommandError(LatentPrintError):
    pass


def _jsonable(obj):
    if isinstance(obj, Path):
        return str(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _write_run_json(out_dir: Path, args: argparse.Namespace, **effective) -> None:
    echo = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
    echo["effective"] = _jsonable(effective)
    (out_dir / "run.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _preprocess_cfg(path) -> PreprocessConfig:
    return preprocess_config_from_kv(parse_kv_file(path)) if path else PreprocessConfig()


def _experiment(args, records):
    if args.experiment == "roles":
        return protocol.roles_experiment(records, args.gallery_role, args.probe_role, args.train_role)
    return protocol.EXPERIMENTS[args.experiment](records)


def _training_setup(args):
    file_cfg = training_config_from_kv(parse_kv_file(args.config)) if args.config else None
    train_kw = dict(file_cfg.train) if file_cfg else {}
    arc_kw = dict(file_cfg.arcface) if file_cfg else {}
    variant = args.variant or (file_cfg.encoder.get("backbone_variant") if file_cfg else None) or "pretrained_full"
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    if args.seed is not None:
        train_kw["seed"] = args.seed
    train_kw["seed"] = env_seed(train_kw.get("seed", 0))
    train_cfg = TrainConfig(**train_kw)
    if variant == "tiny_test":
        enc = HybridEncoderConfig.tiny(seed=train_cfg.seed)
    else:
        enc = HybridEncoderConfig(seed=train_cfg.seed, load_pretrained=not args.no_pretrained)
    if args.freeze_backbones:
        enc = dataclasses.replace(enc, freeze_backbones=True)
    input_size = args.input_size or (224 if variant == "pretrained_full" else 64)
    policy = AugmentationPolicy()
    return train_cfg, arc_kw, enc, input_size, policy


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = _out_dir(args)
    seed = env_seed(args.seed)
    path = make_corpus(out, args.identities, args.per_identity, args.size, seed, args.holdout)
    _write_run_json(out, args, seed=seed)
    print(f"wrote {path}")
    return 0


def cmd_preprocess(args) -> int:
    records = protocol.load_manifest(args.manifest)
    if not records:
        raise CommandError("no samples in manifest")
    cfg = _preprocess_cfg(args.config)
    out = _out_dir(args)
    (out / "images").mkdir(exist_ok=True)
    kept, excluded = [], []
    for rec in records:
        try:
            img = load_image(protocol.resolve_path(rec, args.manifest))
            mask = None
            if args.mask_dir:
                mpath = Path(args.mask_dir) / f"{rec.sample_id}.png"
                if mpath.exists():
                    mask = load_mask(mpath, img.shape)
            processed = enhance(img, cfg, mask)
        except (OSError, LatentPrintError, ValueError) as exc:
            log.warning("excluding %s: %s", rec.sample_id, exc)
            excluded.append((rec.sample_id, f"{type(exc).__name__}: {exc}"))
            continue
        rel = f"images/{rec.sample_id}.png"
        save_image(out / rel, processed)
        kept.append(dataclasses.replace(rec, path=rel))
    protocol.write_manifest(out / "manifest.csv", kept)
    with open(out / "exclusions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "reason"])
        w.writerows(excluded)
    _write_run_json(out, args, preprocess=cfg, processed=len(kept), excluded=len(excluded))
    print(f"processed {len(kept)} / {len(records)} samples ({len(excluded)} excluded)")
    if not kept:
        raise CommandError("no samples could be processed")
    return 0


def cmd_train(args) -> int:
    records = protocol.load_manifest(args.manifest)
    if args.experiment == "roles":
        # training needs no gallery, so skip the closed-set split
        train_records = [r for r in records if r.role in args.train_role]
    else:
        train_records = _experiment(args, records).train
    train_cfg, arc_kw, enc, input_size, policy = _training_setup(args)
    pre = _preprocess_cfg(args.preprocess_config) if args.raw else None
    out = _out_dir(args)
    loaded = load_model_inputs(train_records, args.manifest, input_size, pre)
    model = build_encoder(enc, not args.no_attention, not args.no_transformer)
    log_path = out / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    result, classes = train_on_records(model, loaded, train_cfg, arc_kw, policy, out / "checkpoint",
                                       log_path, input_size, verbose=args.verbose)
    _write_run_json(out, args, train=train_cfg, arcface=arc_kw, encoder=enc, input_size=input_size,
                    augmentation=policy, n_classes=len(classes), n_train=len(loaded.records),
                    excluded=loaded.excluded)
    print(f"trained {len(result.epoch_losses)} epochs on {len(loaded.records)} samples "
          f"({len(classes)} classes); checkpoint at {result.checkpoint}")
    return 0


def cmd_embed(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint)
    records = protocol.load_manifest(args.manifest)
    if args.role:
        records = [r for r in records if r.role in args.role]
    if not records:
        raise CommandError("no samples selected for embedding")
    pre = _preprocess_cfg(args.preprocess_config) if args.raw else None
    out = _out_dir(args)
    input_size = int(meta.get("input_size", 224))
    loaded = load_model_inputs(records, args.manifest, input_size, pre)
    embeddings = embed_loaded(model, loaded)
    write_embeddings(out / "embeddings.jsonl", embeddings)
    _write_run_json(out, args, input_size=input_size, n_embedded=len(embeddings), excluded=loaded.excluded)
    print(f"embedded {len(embeddings)} samples ({len(loaded.excluded)} excluded)")
    if not embeddings:
        raise CommandError("no samples could be embedded")
    return 0


def _read_split(args):
    if args.embeddings:
        if not args.manifest:
            raise CommandError("--embeddings requires --manifest to define the split")
        records = protocol.load_manifest(args.manifest)
        spec = _experiment(args, records)
        emb = read_embeddings(args.embeddings)
        return emb, [r.sample_id for r in spec.gallery], [r.sample_id for r in spec.probes]
    if not (args.gallery and args.probes):
        raise CommandError("give either --embeddings with --manifest, or --gallery and --probes")
    gallery = read_embeddings(args.gallery)
    probes = read_embeddings(args.probes)
    return gallery + probes, [g.id for g in gallery], [p.id for p in probes]


def cmd_identify(args) -> int:
    gallery = GalleryIndex.from_records(read_embeddings(args.gallery))
    probes = read_embeddings(args.probes)
    out = _out_dir(args)
    top = min(args.top, gallery.n_identities)
    with open(out / "candidates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe_id", "rank", "identity", "score"])
        for p in probes:
            ranked = identify(p.vector, gallery, p.id)
            for rank, (ident, score) in enumerate(ranked.candidates[:top], start=1):
                w.writerow([p.id, rank, ident, f"{score:.6f}"])
    _write_run_json(out, args, n_probes=len(probes), n_identities=gallery.n_identities)
    print(f"ranked {len(probes)} probes against {gallery.n_identities} identities")
    return 0


def cmd_evaluate(args) -> int:
    embeddings, gallery_ids, probe_ids = _read_split(args)
    out = _out_dir(args)
    curve = evaluate_split(embeddings, gallery_ids, probe_ids, args.max_rank)
    write_cmc_csv(out / "cmc.csv", curve)

    by_id = {e.id: e for e in embeddings}
    index = GalleryIndex.from_records(by_id[i] for i in gallery_ids if i in by_id)
    kept = [i for i in probe_ids if i in by_id]
    scores = index.identity_scores([by_id[i].vector for i in kept])
    write_score_matrix(out / "scores.csv", ScoreMatrix(kept, index.identities, scores))
    table = [["rank", args.system_name]] + [[r, curve.percent(r)] for r in curve.ranks]
    write_table_csv(out / "rank_table.csv", table)
    _write_run_json(out, args, n_probes=curve.n_probes, n_excluded=curve.n_excluded,
                    n_identities=index.n_identities)
    summary = ", ".join(f"R{r}={curve.percent(r)}%" for r in (1, 5, 10) if r in curve.accuracy_at_rank)
    print(f"{curve.n_probes} probes ({curve.n_excluded} excluded): {summary}")
    return 0


def cmd_ablate(args) -> int:
    records = protocol.load_manifest(args.manifest)
    spec = _experiment(args, records)
    train_cfg, arc_kw, enc, input_size, policy = _training_setup(args)
    pre = _preprocess_cfg(args.preprocess_config) if args.raw else None
    out = _out_dir(args)
    rows = run_ablation(spec, args.manifest, enc, train_cfg, arc_kw, policy, input_size, pre, out,
                        verbose=args.verbose)
    yes = {True: "Yes", False: "No"}
    table = [["CNN", "Spatial Attention", "Transformer", "Rank-1 (%)", "Rank-10 (%)"]]
    for row in rows:
        top = max(row.curve.ranks)
        table.append(["Yes", yes[row.use_attention], yes[row.use_transformer],
                      row.curve.percent(1), row.curve.percent(min(10, top))])
        write_cmc_csv(out / f"cmc_{row.name.replace('+', '_')}.csv", row.curve)
    write_table_csv(out / "ablation.csv", table)
    _write_run_json(out, args, train=train_cfg, arcface=arc_kw, encoder=enc, input_size=input_size)
    for line in table[1:]:
        print(",".join(str(c) for c in line))
    return 0


def cmd_compare(args) -> int:
    systems = {}
    for item in args.scores:
        name, sep, path = item.partition("=")
        if not sep:
            raise CommandError(f"--scores expects NAME=PATH, got {item!r}")
        systems[name] = read_score_matrix(path)
    truth = {r.sample_id: r.identity_id for r in protocol.load_manifest(args.truth)}
    out = _out_dir(args)
    curves, table = compare_systems(systems, truth, args.max_rank)
    write_table_csv(out / "rank_table.csv", table)
    for name, curve in curves.items():
        write_cmc_csv(out / f"cmc_{name}.csv", curve)
    _write_run_json(out, args, systems=list(systems))
    for line in table:
        print(",".join(str(c) for c in line))
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_split_flags(p):
    p.add_argument("--experiment", choices=sorted(protocol.EXPERIMENTS), default="roles")
    p.add_argument("--gallery-role", nargs="+", default=["gallery"], choices=protocol.ROLES)
    p.add_argument("--probe-role", nargs="+", default=["probe"], choices=protocol.ROLES)
    p.add_argument("--train-role", nargs="+", default=["train"], choices=protocol.ROLES)


def _add_training_flags(p):
    p.add_argument("--config", help="training key-value config file")
    p.add_argument("--variant", choices=["pretrained_full", "tiny_test"])
    p.add_argument("--input-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-pretrained", action="store_true", help="random init for the full variant")
    p.add_argument("--freeze-backbones", action="store_true")
    p.add_argument("--raw", action="store_true", help="run the enhancement pipeline on the fly")
    p.add_argument("--preprocess-config")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentprint", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic grating corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--identities", type=int, default=8)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--holdout", type=int, default=1)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="segment and enhance every manifest image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--mask-dir", help="external masks named <sample_id>.png")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="ArcFace training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_split_flags(p)
    _add_training_flags(p)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-transformer", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed manifest images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--role", nargs="+", choices=protocol.ROLES)
    p.add_argument("--raw", action="store_true")
    p.add_argument("--preprocess-config")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("identify", help="rank gallery identities for each probe")
    p.add_argument("--gallery", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("evaluate", help="CMC / Rank-N evaluation")
    p.add_argument("--embeddings")
    p.add_argument("--manifest")
    p.add_argument("--gallery")
    p.add_argument("--probes")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--system-name", default="Proposed Model")
    _add_split_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the three-variant ablation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_split_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="rank table across external score matrices")
    p.add_argument("--scores", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--truth", required=True, help="manifest mapping probe sample ids to identities")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-rank", type=int, default=10)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ClosedSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (LatentPrintError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
