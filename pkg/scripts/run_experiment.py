#!/usr/bin/env python3
"""Train, embed and evaluate one of the two identification protocols on a user corpus.

The manifest must follow the CSV schema in the README and carry the subset
labels the protocol needs (iiitd_rolled / iiitd_latent for experiment_1,
plus the LFIW subsets for experiment_2). Images are enhanced on the fly.

    python3 scripts/run_experiment.py --manifest data/manifest.csv \
        --experiment experiment_1 --out-dir runs/exp1
"""
import argparse
import sys
from pathlib import Path

from latentprint.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--experiment", choices=["experiment_1", "experiment_2"], required=True)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--config", help="training key-value file (lr, weight_decay, batch_size, epochs, seed, ...)")
    ap.add_argument("--variant", default="pretrained_full", choices=["pretrained_full", "tiny_test"])
    ap.add_argument("--ablate", action="store_true", help="also run the three-variant ablation")
    args = ap.parse_args()

    out = Path(args.out_dir)
    exp = ["--experiment", args.experiment]
    train = ["--variant", args.variant, "--raw"] + (["--config", args.config] if args.config else [])
    steps = [
        ["train", "--manifest", args.manifest, "--out-dir", str(out / "train")] + exp + train,
        ["embed", "--checkpoint", str(out / "train" / "checkpoint"), "--manifest", args.manifest,
         "--raw", "--out-dir", str(out / "embed")],
        ["evaluate", "--embeddings", str(out / "embed" / "embeddings.jsonl"), "--manifest", args.manifest,
         "--out-dir", str(out / "eval")] + exp,
    ]
    if args.ablate:
        steps.append(["ablate", "--manifest", args.manifest, "--out-dir", str(out / "ablate")] + exp + train)
    for argv in steps:
        code = cli(argv)
        if code != 0:
            sys.exit(code)


if __name__ == "__main__":
    main()
