"""Dataset manifests, experiment definitions and the ablation grid.

Manifest CSV (UTF-8, header required)::

    sample_id,path,subject_id,finger_id,role,subset

``role`` is one of gallery/probe/train; ``subset`` is empty or one of
:data:`SUBSETS`. Identity is finger-level: ``subject_id + "/" + finger_id``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import ClosedSetError, ConfigError, ManifestError

COLUMNS = ["sample_id", "path", "subject_id", "finger_id", "role", "subset"]
ROLES = ("gallery", "probe", "train")
SUBSETS = ("R_opt", "R_cap", "Smt", "L_wall", "L_ipad", "L_alum", "iiitd_latent", "iiitd_rolled")
IIITD = ("iiitd_latent", "iiitd_rolled")
LFIW_PROBES = ("Smt", "L_wall", "L_ipad", "L_alum")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    path: str
    subject_id: str
    finger_id: str
    role: str
    subset: str | None = None

    @property
    def identity_id(self) -> str:
        return f"{self.subject_id}/{self.finger_id}"


Predicate = Callable[[SampleRecord], bool]


@dataclass
class ExperimentSpec:
    name: str
    gallery_filter: Predicate
    probe_filter: Predicate
    train_filter: Predicate
    gallery: list[SampleRecord] = field(default_factory=list)
    probes: list[SampleRecord] = field(default_factory=list)
    train: list[SampleRecord] = field(default_factory=list)
    ranks: range = range(1, 11)
    closed_set: bool = True

    @property
    def gallery_identities(self) -> list[str]:
        return list(dict.fromkeys(r.identity_id for r in self.gallery))


# ---------------------------------------------------------------------------
# manifest IO

def load_manifest(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}:1: missing header")
        header = [h.strip() for h in header]
        if header != COLUMNS:
            raise ManifestError(f"{path}:1: header must be {','.join(COLUMNS)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
            sample_id, rel, subject, finger, role, subset = (c.strip() for c in row)
            for name, value in (("sample_id", sample_id), ("path", rel), ("subject_id", subject),
                                ("finger_id", finger)):
                if not value:
                    raise ManifestError(f"{path}:{lineno}: empty {name}")
            if role not in ROLES:
                raise ManifestError(f"{path}:{lineno}: unknown role {role!r}")
            if subset and subset not in SUBSETS:
                raise ManifestError(f"{path}:{lineno}: unknown subset {subset!r}")
            if sample_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate sample_id {sample_id!r} (first on line {seen[sample_id]})")
            seen[sample_id] = lineno
            records.append(SampleRecord(sample_id, rel, subject, finger, role, subset or None))
    return records


def write_manifest(path: str | Path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.path, r.subject_id, r.finger_id, r.role, r.subset or ""])


def resolve_path(record: SampleRecord, manifest_path: str | Path) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------------------
# experiments

def check_closed_set(gallery: Sequence[SampleRecord], probes: Sequence[SampleRecord]) -> None:
    enrolled = {r.identity_id for r in gallery}
    missing = {r.identity_id for r in probes} - enrolled
    if missing:
        raise ClosedSetError(missing, what="probe identities")


def _build(name, records, gallery_filter, probe_filter, train_filter, closed_set=True) -> ExperimentSpec:
    records = list(records)
    spec = ExperimentSpec(
        name=name,
        gallery_filter=gallery_filter,
        probe_filter=probe_filter,
        train_filter=train_filter,
        gallery=[r for r in records if gallery_filter(r)],
        probes=[r for r in records if probe_filter(r)],
        train=[r for r in records if train_filter(r)],
        closed_set=closed_set,
    )
    shared = {r.sample_id for r in spec.gallery} & {r.sample_id for r in spec.probes}
    if shared:
        raise ConfigError(f"{name}: records in both gallery and probes: {sorted(shared)[:10]}")
    if not spec.gallery:
        raise ConfigError(f"{name}: empty gallery")
    if closed_set:
        check_closed_set(spec.gallery, spec.probes)
    return spec


def experiment_1(records: Iterable[SampleRecord]) -> ExperimentSpec:
    """IIITD closed set: rolled prints enrolled, latents probed; latents also train."""
    records = list(records)
    subsets = {r.subset for r in records}
    if "iiitd_rolled" not in subsets:
        raise ConfigError("experiment_1 needs iiitd_rolled records for the gallery")
    if "iiitd_latent" not in subsets:
        raise ConfigError("experiment_1 needs iiitd_latent records for the probes")
    return _build(
        "experiment_1", records,
        gallery_filter=lambda r: r.subset == "iiitd_rolled",
        probe_filter=lambda r: r.subset == "iiitd_latent",
        train_filter=lambda r: r.subset == "iiitd_latent",
    )


def experiment_2(records: Iterable[SampleRecord]) -> ExperimentSpec:
    """Cross-dataset: train on all IIITD, enroll LFIW R_opt, probe the other LFIW captures.

    R_cap is on neither side.
    """
    records = list(records)
    subsets = {r.subset for r in records}
    if "R_opt" not in subsets:
        raise ConfigError("experiment_2 needs R_opt records for the gallery")
    if not subsets & set(LFIW_PROBES):
        raise ConfigError(f"experiment_2 needs probe records from {', '.join(LFIW_PROBES)}")
    return _build(
        "experiment_2", records,
        gallery_filter=lambda r: r.subset == "R_opt",
        probe_filter=lambda r: r.subset in LFIW_PROBES,
        train_filter=lambda r: r.subset in IIITD,
    )


def roles_experiment(records: Iterable[SampleRecord], gallery_roles=("gallery",), probe_roles=("probe",),
                     train_roles=("train",), closed_set: bool = True) -> ExperimentSpec:
    """Split by the manifest's role column (used for user corpora and the synthetic set)."""
    g, p, t = set(gallery_roles), set(probe_roles), set(train_roles)
    if g & p:
        raise ConfigError(f"a role cannot be both gallery and probe: {sorted(g & p)}")
    return _build(
        "roles", records,
        gallery_filter=lambda r: r.role in g,
        probe_filter=lambda r: r.role in p,
        train_filter=lambda r: r.role in t,
        closed_set=closed_set,
    )


EXPERIMENTS = {"experiment_1": experiment_1, "experiment_2": experiment_2, "roles": roles_experiment}


def ablation_grid() -> list[tuple[str, bool, bool]]:
    """(name, use_attention, use_transformer); the CNN trunk is always on."""
    return [("cnn", False, False), ("cnn+sa", True, False), ("full", True, True)]


# ---------------------------------------------------------------------------
# count-faithful synthetic manifest

def _spread(total: int, buckets: int) -> list[int]:
    base, extra = divmod(total, buckets)
    return [base + (1 if i < extra else 0) for i in range(buckets)]


def reference_count_manifest() -> list[SampleRecord]:
    """Placeholder records with the reference IIITD and LFIW dataset sizes.

    IIITD: 15 subjects x 10 fingers, one rolled print per finger (150) and
    1046 latents spread over the fingers. LFIW: 60 subjects, 6000 images,
    1000 per capture subset, fingers cycled per subject.
    """
    records: list[SampleRecord] = []
    fingers = [(f"iiitd_s{s:02d}", f"f{f}") for s in range(15) for f in range(10)]
    for subj, fing in fingers:
        records.append(SampleRecord(f"{subj}_{fing}_rolled", f"iiitd/{subj}_{fing}_rolled.png",
                                    subj, fing, "gallery", "iiitd_rolled"))
    for (subj, fing), count in zip(fingers, _spread(1046, len(fingers))):
        for k in range(count):
            records.append(SampleRecord(f"{subj}_{fing}_latent{k}", f"iiitd/{subj}_{fing}_latent{k}.png",
                                        subj, fing, "probe", "iiitd_latent"))
    lfiw_subsets = ("R_opt", "R_cap", "Smt", "L_wall", "L_ipad", "L_alum")
    for subset in lfiw_subsets:
        role = "gallery" if subset in ("R_opt", "R_cap") else "probe"
        for s, count in enumerate(_spread(1000, 60)):
            subj = f"lfiw_s{s:02d}"
            for k in range(count):
                fing = f"f{k % 10}"
                sid = f"{subj}_{subset}_{k:02d}"
                records.append(SampleRecord(sid, f"lfiw/{subset}/{sid}.png", subj, fing, role, subset))
    return records
