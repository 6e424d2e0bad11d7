#!/usr/bin/env python3
"""Print the gallery/probe/train sizes each protocol yields on a manifest.

Without ``--manifest`` a placeholder manifest with the reference dataset
sizes is used (150 rolled prints, 1046 latents, 60 LFIW subjects x 6 subsets).
"""
import argparse
from collections import Counter

from latentprint.protocol import EXPERIMENTS, load_manifest, reference_count_manifest, write_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--manifest")
    ap.add_argument("--write", help="save the placeholder manifest here")
    args = ap.parse_args()
    records = load_manifest(args.manifest) if args.manifest else reference_count_manifest()
    if args.write:
        write_manifest(args.write, records)
    for name in ("experiment_1", "experiment_2"):
        spec = EXPERIMENTS[name](records)
        subjects = len({r.subject_id for r in spec.gallery})
        print(f"{name}: gallery {len(spec.gallery)} samples / {len(spec.gallery_identities)} identities / "
              f"{subjects} subjects; probes {len(spec.probes)}; train {len(spec.train)}")
        print(f"  probe subsets: {dict(Counter(r.subset for r in spec.probes))}")


if __name__ == "__main__":
    main()
