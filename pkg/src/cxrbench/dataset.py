"""Manifest ingestion, stratified split planning and class weights."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ManifestParseError, ValidationError

log = logging.getLogger(__name__)

NEGATIVE = "negative"
POSITIVE = "positive"
LABELS = (NEGATIVE, POSITIVE)
SUBSETS = ("train", "test")
N_SPLITS = 5

TSV_HEADER = ("image_id", "path", "label", "patient_id", "source", "subset")

# COVIDx class tokens; anything that is not COVID-19 positive is the negative class
_LABEL_TOKENS = {
    "negative": NEGATIVE,
    "positive": POSITIVE,
    "normal": NEGATIVE,
    "pneumonia": NEGATIVE,
    "covid-19": POSITIVE,
    "covid19": POSITIVE,
    "covid": POSITIVE,
}


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    label: str
    patient_id: str | None = None
    source: str = "synthetic"
    subset: str = "train"

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"unknown label {self.label!r} for {self.image_id}")
        if self.subset not in SUBSETS:
            raise ValidationError(f"unknown subset {self.subset!r} for {self.image_id}")


@dataclass(frozen=True)
class DatasetCounts:
    c_negative: int
    c_positive: int

    @property
    def t(self) -> int:
        return self.c_negative + self.c_positive

    @classmethod
    def from_entries(cls, entries: Iterable[ManifestEntry]) -> "DatasetCounts":
        labels = [e.label for e in entries]
        return cls(labels.count(NEGATIVE), labels.count(POSITIVE))


@dataclass(frozen=True)
class ClassWeights:
    w_negative: float
    w_positive: float

    def for_label(self, label: str) -> float:
        return self.w_positive if label == POSITIVE else self.w_negative

    def as_tuple(self) -> tuple[float, float]:
        """Weights ordered by class index (negative=0, positive=1)."""
        return (self.w_negative, self.w_positive)


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    split_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    val_fraction: float = field(default=0.2, compare=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "split_index": self.split_index,
            "val_fraction": self.val_fraction,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            seed=int(d["seed"]),
            split_index=int(d["split_index"]),
            train_ids=tuple(d["train_ids"]),
            val_ids=tuple(d["val_ids"]),
            val_fraction=float(d.get("val_fraction", 0.2)),
        )


def label_index(label: str) -> int:
    return LABELS.index(label)


def normalize_label(token: str) -> str:
    try:
        return _LABEL_TOKENS[token.strip().lower()]
    except KeyError:
        raise ValidationError(f"unknown label token {token!r}") from None


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------


def load_manifest(
    path: str | Path,
    format: str = "tsv",
    *,
    subset: str | None = None,
    image_root: str | Path | None = None,
) -> list[ManifestEntry]:
    """Read a manifest file into validated entries.

    ``format`` is ``"tsv"`` (the harness's own header-first layout) or
    ``"covidx_txt"`` (space separated ``patient_id filename class source``).
    COVIDx list files carry no subset column: pass ``subset`` explicitly or
    it is taken from the file name (``test`` anywhere in the stem means the
    test subset). Relative image paths are resolved against ``image_root``,
    defaulting to the manifest's own directory.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    if format == "tsv":
        entries = _read_tsv(path, root)
    elif format == "covidx_txt":
        if subset is None:
            subset = "test" if "test" in path.stem.lower() else "train"
        entries = _read_covidx(path, root, subset)
    else:
        raise ValidationError(f"unknown manifest format {format!r}; expected tsv or covidx_txt")
    check_unique_ids(entries)
    return entries


def _resolve(root: Path, p: str) -> str:
    pp = Path(p)
    return str(pp if pp.is_absolute() else root / pp)


def _read_tsv(path: Path, root: Path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8", newline="") as f:
        lines = f.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != TSV_HEADER:
        raise ManifestParseError(path, 1, "expected header " + "\\t".join(TSV_HEADER))
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(TSV_HEADER):
            raise ManifestParseError(path, no, f"expected {len(TSV_HEADER)} fields, got {len(cells)}")
        image_id, p, label, patient, source, subset = cells
        if label not in LABELS:
            raise ValidationError(f"{path}:{no}: unknown label {label!r}")
        try:
            entries.append(
                ManifestEntry(image_id, _resolve(root, p), label, patient or None, source, subset)
            )
        except ValidationError as e:
            raise ValidationError(f"{path}:{no}: {e}") from None
    return entries


def _read_covidx(path: Path, root: Path, subset: str) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            cells = line.split()
            if len(cells) != 4:
                raise ManifestParseError(path, no, f"expected 4 space-separated fields, got {len(cells)}")
            patient, filename, cls, source = cells
            try:
                label = normalize_label(cls)
            except ValidationError as e:
                raise ValidationError(f"{path}:{no}: {e}") from None
            entries.append(
                ManifestEntry(
                    image_id=Path(filename).stem,
                    path=_resolve(root, filename),
                    label=label,
                    patient_id=patient,
                    source=source,
                    subset=subset,
                )
            )
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: str | Path, *, relative_to: str | Path | None = None) -> None:
    path = Path(path)
    rel = Path(relative_to) if relative_to is not None else None
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\t".join(TSV_HEADER) + "\n")
        for e in entries:
            p = e.path
            if rel is not None:
                try:
                    p = str(Path(p).relative_to(rel))
                except ValueError:
                    pass
            f.write("\t".join([e.image_id, p, e.label, e.patient_id or "", e.source, e.subset]) + "\n")


def check_unique_ids(entries: Sequence[ManifestEntry]) -> None:
    seen = set()
    for e in entries:
        if e.image_id in seen:
            raise ValidationError(f"duplicate image_id {e.image_id!r}")
        seen.add(e.image_id)


def patient_overlap(entries: Sequence[ManifestEntry]) -> set[str]:
    """Patient ids present in both the train and test subsets."""
    train = {e.patient_id for e in entries if e.subset == "train" and e.patient_id}
    test = {e.patient_id for e in entries if e.subset == "test" and e.patient_id}
    return train & test


def check_patient_disjoint(entries: Sequence[ManifestEntry]) -> None:
    shared = patient_overlap(entries)
    if shared:
        sample = ", ".join(sorted(shared)[:5])
        raise ValidationError(f"{len(shared)} patient(s) appear in both train and test: {sample}")


def subset_entries(entries: Sequence[ManifestEntry], subset: str) -> list[ManifestEntry]:
    return [e for e in entries if e.subset == subset]


# ---------------------------------------------------------------------------
# class weights and splits
# ---------------------------------------------------------------------------


def compute_class_weights(counts: DatasetCounts) -> ClassWeights:
    """Inverse-frequency weights scaled so each class contributes t/2."""
    if counts.c_negative <= 0 or counts.c_positive <= 0:
        raise ValidationError(f"class counts must both be positive, got {counts}")
    half = counts.t / 2.0
    return ClassWeights(half / counts.c_negative, half / counts.c_positive)


def stratified_val_count(n: int, val_fraction: float) -> int:
    """Round-half-up of ``n * val_fraction`` on the decimal value of the fraction."""
    k = (Decimal(n) * Decimal(repr(float(val_fraction)))).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return int(k)


def build_splits(
    manifest: Sequence[ManifestEntry],
    val_fraction: float = 0.2,
    seeds: Sequence[int] = (1, 2, 3, 4, 5),
) -> list[SplitPlan]:
    """One stratified train/validation plan per seed over the train subset.

    Each class is shuffled independently with a generator seeded from the
    plan's seed (ids are sorted first, so manifest order does not matter)
    and the first ``round_half_up(c_i * val_fraction)`` ids go to validation.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    seeds = [int(s) for s in seeds]
    if len(seeds) != N_SPLITS:
        raise ValidationError(f"expected {N_SPLITS} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"seeds must be distinct, got {seeds}")

    by_class = {lab: sorted(e.image_id for e in manifest if e.subset == "train" and e.label == lab) for lab in LABELS}
    for lab, ids in by_class.items():
        if len(ids) < 2:
            raise ValidationError(f"need at least 2 train entries of class {lab!r}, got {len(ids)}")

    k = {lab: stratified_val_count(len(ids), val_fraction) for lab, ids in by_class.items()}
    for lab, ids in by_class.items():
        if k[lab] < 1:
            warnings.warn(f"class {lab!r} gets no validation items at val_fraction={val_fraction}", stacklevel=2)
        elif k[lab] >= len(ids):
            warnings.warn(f"class {lab!r} gets no training items at val_fraction={val_fraction}", stacklevel=2)

    plans = []
    for i, seed in enumerate(seeds, start=1):
        rng = np.random.default_rng(seed)
        train_ids: list[str] = []
        val_ids: list[str] = []
        for lab in LABELS:
            ids = by_class[lab]
            order = rng.permutation(len(ids))
            shuffled = [ids[j] for j in order]
            val_ids.extend(shuffled[: k[lab]])
            train_ids.extend(shuffled[k[lab]:])
        plans.append(SplitPlan(seed, i, tuple(sorted(train_ids)), tuple(sorted(val_ids)), val_fraction))
    log.debug("built %d splits, validation counts %s", len(plans), k)
    return plans
