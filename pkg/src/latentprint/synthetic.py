"""Synthetic latent-like grating corpus for desk-scale runs and tests.

Each identity is a ridge pattern with its own period and orientation. An
impression renders that pattern inside a randomly placed elliptical region
with a random phase, a small orientation jitter and additive noise, on a
flat low-contrast background with a small detached clutter patch (so the
largest-component step has something to discard).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import save_image

# (period px, ridge angle deg). Horizontal flips map an angle to its mirror,
# so only one diagonal is used; 45-degree patterns keep long periods because
# short diagonal periods alias once inputs are downsampled.
PATTERN_TABLE = (
    (8.0, 0.0), (8.0, 90.0), (17.0, 0.0), (17.0, 90.0),
    (12.0, 0.0), (12.0, 90.0), (10.0, 45.0), (20.0, 45.0),
    (9.5, 0.0), (9.5, 90.0), (14.5, 0.0), (14.5, 90.0),
    (22.0, 0.0), (22.0, 90.0), (13.0, 45.0), (26.0, 45.0),
    (7.0, 0.0), (7.0, 90.0), (11.0, 0.0), (11.0, 90.0),
    (15.5, 0.0), (15.5, 90.0), (19.0, 0.0), (19.0, 90.0),
    (25.0, 0.0), (25.0, 90.0), (16.0, 45.0), (23.0, 45.0),
    (28.0, 0.0), (28.0, 90.0), (11.5, 45.0), (30.0, 45.0),
)


def grating(shape, theta: float, period: float, phase: float = 0.0, amplitude: float = 100.0,
            mean: float = 127.5) -> np.ndarray:
    """Sinusoid whose crests run along direction ``(cos theta, sin theta)`` in (col, row) space."""
    y, x = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    across = -x * math.sin(theta) + y * math.cos(theta)
    return mean + amplitude * np.cos(2.0 * math.pi * across / period + phase)


@dataclass(frozen=True)
class IdentityPattern:
    period: float
    angle_deg: float


def identity_patterns(n: int) -> list[IdentityPattern]:
    """The first ``n`` distinct (period, angle) pairs; the first 8 are the easiest to separate."""
    if n > len(PATTERN_TABLE):
        raise ValueError(f"at most {len(PATTERN_TABLE)} synthetic identities supported")
    return [IdentityPattern(p, a) for p, a in PATTERN_TABLE[:n]]


def render_impression(pattern: IdentityPattern, rng: np.random.Generator, size: int = 128,
                      jitter_deg: float = 4.0, noise: float = 12.0) -> np.ndarray:
    theta = math.radians(pattern.angle_deg + rng.uniform(-jitter_deg, jitter_deg))
    img = np.full((size, size), 150.0) + rng.normal(0.0, 3.0, (size, size))
    ridges = grating((size, size), theta, pattern.period, rng.uniform(0, 2 * math.pi))

    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    ry = size * rng.uniform(0.30, 0.38)
    rx = size * rng.uniform(0.28, 0.36)
    inside = ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
    img[inside] = ridges[inside] + rng.normal(0.0, noise, int(inside.sum()))

    # detached clutter in a corner
    c = size // 8
    corner = rng.integers(0, 4)
    r0 = 2 if corner < 2 else size - c - 2
    c0 = 2 if corner % 2 == 0 else size - c - 2
    img[r0:r0 + c, c0:c0 + c] = rng.uniform(0, 255, (c, c))
    return np.clip(img, 0, 255)


def make_corpus(out_dir: str | Path, n_identities: int = 8, per_identity: int = 20, size: int = 128,
                seed: int = 0, holdout: int = 1) -> Path:
    """Write PNGs plus ``manifest.csv``.

    The last ``holdout`` impressions of every identity get role ``probe``;
    the rest get role ``train``. Desk-scale evaluation enrolls the ``train``
    impressions as the gallery.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for k, pattern in enumerate(identity_patterns(n_identities)):
        subject = f"s{k:02d}"
        for j in range(per_identity):
            img = render_impression(pattern, rng, size)
            rel = f"images/{subject}_f0_{j:02d}.png"
            save_image(out_dir / rel, img)
            role = "probe" if j >= per_identity - holdout else "train"
            rows.append([f"{subject}_{j:02d}", rel, subject, "f0", role, ""])
    path = out_dir / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "path", "subject_id", "finger_id", "role", "subset"])
        writer.writerows(rows)
    return path
