"""
Synthetic multi-center glioma cohort.

Subjects carry encoder-level feature vectors for FLAIR and T1c instead of images.
Both sequences are class-conditional views of one shared subject latent, so each
sequence predicts the other; centers apply their own affine shift and drop whole
sequences at their own rates. Also home of the split protocol and the JSONL
dataset format.
"""
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import (
    Center, Codel, CohortConfig, IDH, INDEPENDENT_CENTER, Mode, NUM_FOLDS,
    Pathology, SCHEMA_VERSION, Sequence, SplitName, TRAIN_FRACTION,
)
from src.errors import ConfigError, DatasetFormatError, EmptyInputError, ProtocolViolation


# === Labels ===
WHO_MARKERS = {
    Pathology.OLIGODENDROGLIOMA: (IDH.MUTANT, Codel.CODELETED),
    Pathology.ASTROCYTOMA: (IDH.MUTANT, Codel.INTACT),
    Pathology.GLIOBLASTOMA: (IDH.WILDTYPE, Codel.INTACT),
}


def label_from_pathology(pathology: Pathology) -> Tuple[IDH, Codel]:
    """Molecular markers implied by the WHO CNS5 category."""
    return WHO_MARKERS[Pathology(pathology)]


@dataclass(frozen=True)
class LabelSet:
    idh: IDH
    codel: Codel
    pathology: Pathology

    @classmethod
    def from_pathology(cls, pathology: Pathology) -> "LabelSet":
        idh, codel = label_from_pathology(pathology)
        return cls(idh=idh, codel=codel, pathology=Pathology(pathology))

    def is_who_consistent(self) -> bool:
        return WHO_MARKERS[self.pathology] == (self.idh, self.codel)


@dataclass(eq=False)
class SampleRecord:
    """One subject. A sequence vector is None when that sequence was not acquired."""
    id: str
    center: Center
    fl: Optional[np.ndarray]
    t1c: Optional[np.ndarray]
    labels: LabelSet

    def __post_init__(self):
        if self.fl is None and self.t1c is None:
            raise DatasetFormatError(f"{self.id}: at least one sequence must be present")

    def raw(self, seq: Sequence) -> Optional[np.ndarray]:
        return self.fl if seq is Sequence.FL else self.t1c

    def has(self, seq: Sequence) -> bool:
        return self.raw(seq) is not None

    @property
    def is_complete(self) -> bool:
        return self.fl is not None and self.t1c is not None

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.id == other.id
            and self.center == other.center
            and self.labels == other.labels
            and same(self.fl, other.fl)
            and same(self.t1c, other.t1c)
        )


# === Generator ===
@dataclass
class CohortStructure:
    """Fixed generative structure drawn once per seed, before any subject."""
    loadings: Dict[Sequence, np.ndarray]                   # (latent_factors, raw_dim)
    class_means: np.ndarray                                # (n_classes, latent_factors)
    center_offset: Dict[Center, np.ndarray]                # (latent_factors,)
    center_scale: Dict[Tuple[Center, Sequence], np.ndarray]  # (raw_dim,)


def _draw_structure(cfg: CohortConfig, rng: np.random.Generator) -> CohortStructure:
    L, R = cfg.latent_factors, cfg.raw_dim
    loadings = {seq: rng.normal(0.0, 1.0 / np.sqrt(L), size=(L, R)) for seq in Sequence}
    class_means = cfg.class_separation * rng.normal(0.0, 1.0, size=(len(Pathology), L))
    center_offset, center_scale = {}, {}
    for center in Center:
        magnitude = cfg.shift_magnitude
        if center is INDEPENDENT_CENTER:
            magnitude *= cfg.independent_shift_multiplier
        center_offset[center] = magnitude * rng.normal(0.0, 1.0, size=L)
        for seq in Sequence:
            center_scale[center, seq] = 1.0 + magnitude * rng.uniform(-0.5, 0.5, size=R)
    return CohortStructure(loadings, class_means, center_offset, center_scale)


def generate_cohort(cfg: CohortConfig) -> List[SampleRecord]:
    """
    Draw every subject of every center, deterministically under cfg.seed.

    s   = z + mu[y] + m[center]
    fl  = (s W_fl) * g[center, fl] + noise
    t1c = ((c s + sqrt(1 - c^2) xi) W_t1c) * g[center, t1c] + noise

    Class and center structure live in the shared latent s, so every path from
    FL to T1c runs through the coupling c: at c = 0 the two sequences are
    uncorrelated over the pooled cohort. The center's sequence-level
    missingness comes last (an all-missing draw is redrawn).
    """
    rng = np.random.default_rng(cfg.seed)
    structure = _draw_structure(cfg, rng)
    L, R = cfg.latent_factors, cfg.raw_dim
    c = cfg.coupling
    independent_share = np.sqrt(max(0.0, 1.0 - c * c))
    prior = np.asarray(cfg.class_prior)

    records = []
    for center in Center:
        for i in range(cfg.counts[center]):
            pathology = Pathology(int(rng.choice(len(Pathology), p=prior)))
            shared = rng.standard_normal(L) + structure.class_means[pathology] + structure.center_offset[center]
            xi = rng.standard_normal(L)
            latents = {Sequence.FL: shared, Sequence.T1C: c * shared + independent_share * xi}

            views = {}
            for seq in Sequence:
                x = (latents[seq] @ structure.loadings[seq]) * structure.center_scale[center, seq]
                views[seq] = x + cfg.noise_scale * rng.standard_normal(R)

            while True:
                drop_fl = rng.random() < cfg.missing_fl[center]
                drop_t1c = rng.random() < cfg.missing_t1c[center]
                if not (drop_fl and drop_t1c):
                    break

            records.append(SampleRecord(
                id=f"{center.value}-{i:04d}",
                center=center,
                fl=None if drop_fl else views[Sequence.FL],
                t1c=None if drop_t1c else views[Sequence.T1C],
                labels=LabelSet.from_pathology(pathology),
            ))
    return records


def cohort_summary(records: List[SampleRecord]) -> pd.DataFrame:
    """Per-center totals, completeness and label frequencies."""
    rows = []
    for center in Center:
        members = [r for r in records if r.center is center]
        rows.append({
            "center": center.value,
            "n": len(members),
            "complete": sum(r.is_complete for r in members),
            "missing_fl": sum(r.fl is None for r in members),
            "missing_t1c": sum(r.t1c is None for r in members),
            **{f"n_{p.name.lower()}": sum(r.labels.pathology is p for r in members) for p in Pathology},
        })
    return pd.DataFrame(rows)


# === Split Protocol ===
@dataclass
class SplitPlan:
    """
    Held-out center as independent test; per-center train/internal split of the
    remaining complete records; CV folds over the complete training pool.
    Incomplete records only ever join MS training sets.
    """
    folds: List[List[str]]
    internal_test: List[str]
    independent_test: List[str]
    incomplete: List[str]
    excluded: List[str] = field(default_factory=list)
    mode: Mode = Mode.MS
    seed: int = 0
    warnings: List[str] = field(default_factory=list)

    @property
    def num_folds(self) -> int:
        return len(self.folds)

    @property
    def fs_pool(self) -> List[str]:
        return [i for fold in self.folds for i in fold]

    def validation_ids(self, fold: int) -> List[str]:
        return list(self.folds[fold])

    def fs_train_ids(self, fold: int) -> List[str]:
        return [i for k, ids in enumerate(self.folds) if k != fold for i in ids]

    def train_ids(self, fold: int, mode: Optional[Mode] = None) -> List[str]:
        mode = Mode(mode or self.mode)
        ids = self.fs_train_ids(fold)
        if mode is Mode.MS:
            ids = ids + list(self.incomplete)
        return ids

    def test_ids(self, split: SplitName, fold: Optional[int] = None) -> List[str]:
        split = SplitName(split)
        if split is SplitName.INTERNAL:
            return list(self.internal_test)
        if split is SplitName.INDEPENDENT:
            return list(self.independent_test)
        if fold is None:
            raise ConfigError("validation split needs a fold index")
        return self.validation_ids(fold)

    def with_mode(self, mode: Mode) -> "SplitPlan":
        return SplitPlan(
            folds=[list(f) for f in self.folds], internal_test=list(self.internal_test),
            independent_test=list(self.independent_test), incomplete=list(self.incomplete),
            excluded=list(self.excluded), mode=Mode(mode), seed=self.seed, warnings=list(self.warnings),
        )

    def check(self, records_by_id: Optional[Dict[str, SampleRecord]] = None):
        """Raise ProtocolViolation on overlapping partitions or incomplete test records."""
        parts = {f"fold{k}": set(ids) for k, ids in enumerate(self.folds)}
        parts.update(internal=set(self.internal_test), independent=set(self.independent_test),
                     incomplete=set(self.incomplete))
        names = list(parts)
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                overlap = parts[names[a]] & parts[names[b]]
                if overlap:
                    raise ProtocolViolation(f"{names[a]} and {names[b]} share ids, e.g. {sorted(overlap)[0]}")
        if records_by_id is not None:
            for name in ("internal", "independent") + tuple(f"fold{k}" for k in range(self.num_folds)):
                bad = [i for i in parts[name] if not records_by_id[i].is_complete]
                if bad:
                    raise ProtocolViolation(f"incomplete record {bad[0]} in {name}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "folds": self.folds, "internal_test": self.internal_test,
            "independent_test": self.independent_test, "incomplete": self.incomplete,
            "excluded": self.excluded, "mode": Mode(self.mode).value, "seed": self.seed,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitPlan":
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in data.items() if k in known}
        return cls(**{**values, "mode": Mode(values.get("mode", Mode.MS.value))})


def _train_share(n: int, train_fraction: float) -> int:
    n_train = int(np.floor(train_fraction * n + 0.5))
    if n >= 2:
        n_train = min(n_train, n - 1)
    return n_train


def split_cohort(
    records: List[SampleRecord],
    seed: int = 0,
    num_folds: int = NUM_FOLDS,
    train_fraction: float = TRAIN_FRACTION,
    independent_center: Center = INDEPENDENT_CENTER,
    mode: Mode = Mode.MS,
) -> SplitPlan:
    """
    Stratified-by-center protocol:
    1. every complete record of `independent_center` is the independent test;
    2. each other center's complete records are shuffled and split
       train_fraction : rest into the FS pool and the internal test;
    3. the FS pool is dealt round-robin (center by center) into `num_folds` folds;
    4. incomplete records form the MS surplus.
    """
    if not records:
        raise EmptyInputError("cannot split an empty cohort")
    rng = np.random.default_rng(seed)
    plan = SplitPlan(folds=[[] for _ in range(num_folds)], internal_test=[], independent_test=[],
                     incomplete=[], mode=Mode(mode), seed=seed)

    cursor = 0
    for center in Center:
        members = [r for r in records if r.center is center]
        complete = [r.id for r in members if r.is_complete]
        incomplete = [r.id for r in members if not r.is_complete]
        if center is independent_center:
            plan.independent_test.extend(complete)
            plan.excluded.extend(incomplete)
            continue
        plan.incomplete.extend(incomplete)

        n = len(complete)
        if n == 0:
            continue
        if n < num_folds:
            message = f"{center.value}: only {n} complete samples, assigning proportionally"
            print(f"  [WARNING] {message}")
            plan.warnings.append(message)
        order = [complete[k] for k in rng.permutation(n)]
        n_train = _train_share(n, train_fraction)
        for rid in order[:n_train]:
            plan.folds[cursor % num_folds].append(rid)
            cursor += 1
        plan.internal_test.extend(order[n_train:])

    plan.check()
    return plan


def expansion_report(plan: SplitPlan, fold: int = 0) -> Dict[str, Any]:
    """Usable training counts without (FS) and with (MS) incomplete records."""
    fs_pool = len(plan.fs_pool)
    ms_pool = fs_pool + len(plan.incomplete)
    return {
        "fs_pool": fs_pool,
        "ms_pool": ms_pool,
        "fs_train_fold": len(plan.fs_train_ids(fold)),
        "ms_train_fold": len(plan.train_ids(fold, Mode.MS)),
        "internal_test": len(plan.internal_test),
        "independent_test": len(plan.independent_test),
        "incomplete_share_of_ms": len(plan.incomplete) / ms_pool if ms_pool else 0.0,
        "ms_over_fs": ms_pool / fs_pool if fs_pool else float("nan"),
    }


# === Dataset Files ===
def _record_to_dict(r: SampleRecord) -> Dict[str, Any]:
    return {
        "id": r.id,
        "center": r.center.value,
        "idh": int(r.labels.idh),
        "codel": int(r.labels.codel),
        "path": int(r.labels.pathology),
        "mask_fl": r.fl is not None,
        "mask_t1c": r.t1c is not None,
        "fl": None if r.fl is None else [float(v) for v in r.fl],
        "t1c": None if r.t1c is None else [float(v) for v in r.t1c],
    }


def write_dataset(records: List[SampleRecord], path: str, seed: Optional[int] = None, raw_dim: Optional[int] = None):
    """UTF-8 JSONL: a header object, then one record per line."""
    if raw_dim is None:
        first = next((r.fl if r.fl is not None else r.t1c for r in records), None)
        raw_dim = 0 if first is None else int(first.shape[0])
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="\n") as f:
        header = {"raw_dim": raw_dim, "schema_version": SCHEMA_VERSION, "seed": seed}
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for r in records:
            f.write(json.dumps(_record_to_dict(r), ensure_ascii=False) + "\n")


def _parse_vector(data: Dict[str, Any], key: str, mask_key: str, raw_dim: int, line_number: int) -> Optional[np.ndarray]:
    present = data.get(mask_key)
    values = data.get(key)
    if not isinstance(present, bool):
        raise DatasetFormatError(f"{mask_key} must be true or false", line_number)
    if present != (values is not None):
        raise DatasetFormatError(f"{mask_key} disagrees with {key}", line_number)
    if values is None:
        return None
    if not isinstance(values, list):
        raise DatasetFormatError(f"{key} must be an array or null", line_number)
    if len(values) != raw_dim:
        raise DatasetFormatError(f"{key} has {len(values)} values, header raw_dim is {raw_dim}", line_number)
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DatasetFormatError(f"{key} contains non-finite values", line_number)
    return arr


def _parse_record(data: Any, raw_dim: int, line_number: int) -> SampleRecord:
    if not isinstance(data, dict):
        raise DatasetFormatError("record must be an object", line_number)
    try:
        labels = LabelSet(idh=IDH(data["idh"]), codel=Codel(data["codel"]), pathology=Pathology(data["path"]))
        center = Center(data["center"])
        rid = data["id"]
    except KeyError as e:
        raise DatasetFormatError(f"missing field {e}", line_number)
    except ValueError as e:
        raise DatasetFormatError(str(e), line_number)
    if not isinstance(rid, str):
        raise DatasetFormatError("id must be a string", line_number)
    if not labels.is_who_consistent():
        raise DatasetFormatError(f"labels violate WHO CNS5 mapping: {labels}", line_number)
    fl = _parse_vector(data, "fl", "mask_fl", raw_dim, line_number)
    t1c = _parse_vector(data, "t1c", "mask_t1c", raw_dim, line_number)
    if fl is None and t1c is None:
        raise DatasetFormatError("record has neither sequence", line_number)
    return SampleRecord(id=rid, center=center, fl=fl, t1c=t1c, labels=labels)


def read_header(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        line = f.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed header ({e.msg})", 1)
    if not isinstance(header, dict) or not isinstance(header.get("raw_dim"), int):
        raise DatasetFormatError("header must be an object with integer raw_dim", 1)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"unsupported schema_version {header.get('schema_version')!r}", 1)
    return header


def read_dataset(path: str) -> List[SampleRecord]:
    if not Path(path).exists():
        raise DatasetFormatError(f"dataset not found: {path}")
    raw_dim = read_header(path)["raw_dim"]
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        next(f)
        for line_number, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"malformed record ({e.msg})", line_number)
            record = _parse_record(data, raw_dim, line_number)
            if record.id in seen:
                raise DatasetFormatError(f"duplicate id {record.id!r}", line_number)
            seen.add(record.id)
            records.append(record)
    return records
