"""Closed-set identification: gallery index, cosine ranking, Rank-N and CMC.

Identity scores aggregate over an identity's gallery templates by maximum.
Ties between identities resolve to gallery insertion order, so every
ranking here is deterministic.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ClosedSetError, ConfigError, DegenerateInputError


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def unit_rows(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any() or not np.isfinite(x).all():
        raise DegenerateInputError("zero or non-finite embedding")
    return x / norms[:, None]


@dataclass
class EmbeddingRecord:
    id: str
    identity: str
    vector: np.ndarray


class GalleryIndex:
    """Immutable set of unit-normalized templates grouped by identity."""

    def __init__(self, sample_ids: Sequence[str], identities: Sequence[str], vectors):
        if len(sample_ids) == 0:
            raise ConfigError("gallery is empty")
        if not (len(sample_ids) == len(identities) == len(vectors)):
            raise ValueError("sample_ids, identities and vectors differ in length")
        if len(set(sample_ids)) != len(sample_ids):
            seen, dupes = set(), []
            for s in sample_ids:
                if s in seen:
                    dupes.append(s)
                seen.add(s)
            raise ConfigError(f"duplicate gallery sample ids: {sorted(set(dupes))[:10]}")
        self.sample_ids = list(sample_ids)
        self.template_identities = list(identities)
        self.vectors = unit_rows(vectors)
        self.vectors.setflags(write=False)
        # identities in first-insertion order
        self.identities: list[str] = list(dict.fromkeys(self.template_identities))
        pos = {ident: i for i, ident in enumerate(self.identities)}
        self.template_to_identity = np.array([pos[i] for i in self.template_identities], dtype=np.int64)

    @classmethod
    def from_records(cls, records: Iterable[EmbeddingRecord]) -> "GalleryIndex":
        records = list(records)
        return cls([r.id for r in records], [r.identity for r in records], [r.vector for r in records])

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_identities(self) -> int:
        return len(self.identities)

    def identity_scores(self, probes) -> np.ndarray:
        """(n_probes, n_identities) max-over-templates cosine scores."""
        sims = unit_rows(probes) @ self.vectors.T
        out = np.full((sims.shape[0], self.n_identities), -np.inf)
        for col in range(sims.shape[1]):
            ident = self.template_to_identity[col]
            np.maximum(out[:, ident], sims[:, col], out=out[:, ident])
        return np.clip(out, -1.0, 1.0)


@dataclass
class RankedCandidates:
    probe_id: str
    candidates: list[tuple[str, float]]

    def position_of(self, identity: str) -> int:
        """1-based rank of ``identity``."""
        for i, (ident, _) in enumerate(self.candidates, start=1):
            if ident == identity:
                return i
        raise KeyError(identity)


TIE_DECIMALS = 12


def _tie_key(scores) -> np.ndarray:
    # scores equal up to roundoff count as ties, so insertion order decides them
    return np.round(np.asarray(scores, dtype=np.float64), TIE_DECIMALS)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending; equal scores keep index order."""
    return np.argsort(-_tie_key(scores), kind="stable")


def identify(probe, gallery: GalleryIndex, probe_id: str = "") -> RankedCandidates:
    scores = gallery.identity_scores(probe)[0]
    order = rank_order(scores)
    return RankedCandidates(probe_id, [(gallery.identities[i], float(scores[i])) for i in order])


@dataclass
class CMCCurve:
    accuracy_at_rank: dict[int, float]
    n_probes: int
    n_excluded: int = 0
    hits: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, rank: int) -> float:
        return self.accuracy_at_rank[rank]

    @property
    def ranks(self) -> list[int]:
        return sorted(self.accuracy_at_rank)

    def percent(self, rank: int) -> str:
        return f"{100.0 * self.accuracy_at_rank[rank]:.2f}"


def true_positions(score_matrix: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based position of each row's true column under ``rank_order`` semantics."""
    scores = _tie_key(score_matrix)
    truth = np.asarray(truth, dtype=np.int64)
    rows = np.arange(scores.shape[0])
    own = scores[rows, truth][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (cols < truth[:, None]))
    return ahead.sum(axis=1) + 1


def cmc_from_scores(score_matrix, probe_identities: Sequence[str], gallery_identities: Sequence[str],
                    max_rank: int = 10, probe_ids: Sequence[str] | None = None,
                    n_excluded: int = 0) -> CMCCurve:
    scores = np.asarray(score_matrix, dtype=np.float64)
    if scores.shape != (len(probe_identities), len(gallery_identities)):
        raise ValueError(f"score matrix {scores.shape} does not match "
                         f"{len(probe_identities)} probes x {len(gallery_identities)} identities")
    if len(probe_identities) == 0:
        raise ConfigError("no probes")
    if not 1 <= max_rank <= len(gallery_identities):
        raise ConfigError(f"max_rank {max_rank} outside [1, {len(gallery_identities)}]")
    col = {ident: i for i, ident in enumerate(gallery_identities)}
    probe_ids = list(probe_ids) if probe_ids is not None else [str(i) for i in range(len(probe_identities))]
    missing = [pid for pid, ident in zip(probe_ids, probe_identities) if ident not in col]
    if missing:
        raise ClosedSetError(missing, what="probes")
    truth = np.array([col[i] for i in probe_identities])
    pos = true_positions(scores, truth)
    n = len(probe_identities)
    hits = {r: int((pos <= r).sum()) for r in range(1, max_rank + 1)}
    return CMCCurve({r: hits[r] / n for r in hits}, n, n_excluded, hits)


def cmc(probes: Sequence[tuple], gallery: GalleryIndex, max_rank: int = 10, n_excluded: int = 0) -> CMCCurve:
    """CMC over ``probes`` given as ``(vector, identity)`` or ``(vector, identity, probe_id)``."""
    if not probes:
        raise ConfigError("no probes")
    vectors = [p[0] for p in probes]
    identities = [p[1] for p in probes]
    ids = [p[2] if len(p) > 2 else str(i) for i, p in enumerate(probes)]
    scores = gallery.identity_scores(vectors)
    return cmc_from_scores(scores, identities, gallery.identities, max_rank, ids, n_excluded)


# ---------------------------------------------------------------------------
# files

def write_embeddings(path, records: Iterable[EmbeddingRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            vec = [float(f"{v:.9g}") for v in np.asarray(r.vector, dtype=np.float64).ravel()]
            fh.write(json.dumps({"id": r.id, "identity": r.identity, "vector": vec}) + "\n")


def read_embeddings(path) -> list[EmbeddingRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(EmbeddingRecord(str(obj["id"]), str(obj["identity"]),
                                           np.asarray(obj["vector"], dtype=np.float64)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad embedding record ({exc})") from None
    return out


def write_cmc_csv(path, curve: CMCCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "accuracy_percent"])
        for r in curve.ranks:
            w.writerow([r, curve.percent(r)])


def read_cmc_csv(path) -> dict[int, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(row["rank"]): float(row["accuracy_percent"]) for row in csv.DictReader(fh)}


@dataclass
class ScoreMatrix:
    probe_ids: list[str]
    identities: list[str]
    scores: np.ndarray


def read_score_matrix(path) -> ScoreMatrix:
    """CSV: header = (corner cell, gallery identity ids...); rows = probe id then scores."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty score file")
    identities = [c.strip() for c in rows[0][1:]]
    if len(set(identities)) != len(identities):
        raise ValueError(f"{path}: duplicate identity columns")
    probe_ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(identities) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(identities) + 1} cells, got {len(row)}")
        probe_ids.append(row[0].strip())
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric score") from None
    if len(set(probe_ids)) != len(probe_ids):
        raise ValueError(f"{path}: duplicate probe ids")
    scores = np.asarray(values, dtype=np.float64).reshape(len(probe_ids), len(identities))
    if not np.isfinite(scores).all():
        raise ValueError(f"{path}: non-finite score")
    return ScoreMatrix(probe_ids, identities, scores)


def write_score_matrix(path, matrix: ScoreMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe_id"] + list(matrix.identities))
        for pid, row in zip(matrix.probe_ids, matrix.scores):
            w.writerow([pid] + [f"{v:.9g}" for v in row])


def compare_systems(systems: dict[str, ScoreMatrix], probe_truth: dict[str, str],
                    max_rank: int = 10) -> tuple[dict[str, CMCCurve], list[list]]:
    """One CMC per system plus a rank-by-system table (accuracies in percent).

    All systems must score the same probe set; gallery columns may be ordered
    differently per system.
    """
    if not systems:
        raise ConfigError("no systems to compare")
    names = list(systems)
    reference = set(systems[names[0]].probe_ids)
    for name in names[1:]:
        other = set(systems[name].probe_ids)
        if other != reference:
            diff = sorted(reference.symmetric_difference(other))
            raise AlignmentError(f"probe sets differ between {names[0]!r} and {name!r}: {diff[:10]}")
    curves = {}
    for name in names:
        m = systems[name]
        missing = [p for p in m.probe_ids if p not in probe_truth]
        if missing:
            raise AlignmentError(f"no ground-truth identity for probes {missing[:10]}")
        curves[name] = cmc_from_scores(m.scores, [probe_truth[p] for p in m.probe_ids], m.identities,
                                       min(max_rank, len(m.identities)), m.probe_ids)
    table = [["rank"] + names]
    for r in range(1, max_rank + 1):
        row: list = [r]
        for name in names:
            c = curves[name]
            # beyond the gallery size a closed-set CMC has saturated at 1
            row.append(c.percent(r) if r in c.accuracy_at_rank else f"{100.0:.2f}")
        table.append(row)
    return curves, table


def write_table_csv(path, table: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(table)

