#!/usr/bin/env python3
"""Desk-scale run on the synthetic grating corpus.

Generates the corpus, preprocesses it, trains the tiny hybrid model, scores
the held-out impressions against the training impressions, and runs the
three-variant ablation. Everything goes through the CLI so the outputs match
what a user would get by hand.

    python3 scripts/desk_scale_experiment.py --out-dir runs/desk
"""
import argparse
import csv
import sys
import time
from pathlib import Path

from latentprint.cli import main as cli
from latentprint.matching import read_cmc_csv


def run(step, argv):
    start = time.perf_counter()
    code = cli(argv)
    print(f"[{step}] exit {code} in {time.perf_counter() - start:.1f}s")
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/desk")
    ap.add_argument("--identities", type=int, default=8)
    ap.add_argument("--per-identity", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()

    out = Path(args.out_dir)
    seed = ["--seed", str(args.seed)]
    run("synth", ["synth", "--out-dir", str(out / "raw"), "--identities", str(args.identities),
                  "--per-identity", str(args.per_identity)] + seed)
    run("preprocess", ["preprocess", "--manifest", str(out / "raw" / "manifest.csv"), "--out-dir", str(out / "pre")])
    manifest = str(out / "pre" / "manifest.csv")
    common = ["--variant", "tiny_test", "--epochs", str(args.epochs)] + seed
    run("train", ["train", "--manifest", manifest, "--out-dir", str(out / "train")] + common)
    run("embed", ["embed", "--checkpoint", str(out / "train" / "checkpoint"), "--manifest", manifest,
                  "--out-dir", str(out / "embed")])
    run("evaluate", ["evaluate", "--embeddings", str(out / "embed" / "embeddings.jsonl"), "--manifest", manifest,
                     "--gallery-role", "train", "--probe-role", "probe", "--out-dir", str(out / "eval")])
    curve = read_cmc_csv(out / "eval" / "cmc.csv")
    print("held-out CMC: " + ", ".join(f"R{r}={v:.2f}%" for r, v in curve.items()))

    if not args.skip_ablation:
        run("ablate", ["ablate", "--manifest", manifest, "--out-dir", str(out / "ablate"),
                       "--gallery-role", "train"] + common)
        with open(out / "ablate" / "ablation.csv", newline="") as fh:
            for row in csv.reader(fh):
                print("  ".join(f"{c:>17}" for c in row))


if __name__ == "__main__":
    main()
