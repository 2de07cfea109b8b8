"""Pre-softmax logit averaging and the three ensemble experiments.

Ensemble members are ``(model, split_index)`` pairs whose cached logits are
averaged per image before the decision, never after a softmax.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import LABELS, N_SPLITS, NEGATIVE, POSITIVE
from .errors import DataError, ValidationError
from .metrics import METRICS, AggregateStats, MetricSet, aggregate, confusion_from_arrays, metric_set

LOGIT_COLUMNS = ("run_id", "model", "split_index", "subset", "image_id", "logit_negative", "logit_positive", "true_label")
CACHE_SUBSETS = ("train", "validation", "test")
MAX_TOPK = 7


@dataclass(frozen=True)
class LogitRecord:
    image_id: str
    model: str
    split_index: int
    subset: str
    logit_negative: float
    logit_positive: float
    true_label: str
    run_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.logit_negative) and math.isfinite(self.logit_positive)):
            raise DataError(f"non-finite logits for {self.image_id} ({self.model}#{self.split_index})")
        if self.true_label not in LABELS:
            raise DataError(f"unknown label {self.true_label!r} for {self.image_id}")
        if self.subset not in CACHE_SUBSETS:
            raise DataError(f"unknown subset {self.subset!r} for {self.image_id}")

    @property
    def logits(self) -> tuple[float, float]:
        return (self.logit_negative, self.logit_positive)


def write_logit_csv(records: Iterable[LogitRecord], path) -> None:
    Path(path).write_bytes(logit_csv_bytes(records))


def logit_csv_bytes(records: Iterable[LogitRecord]) -> bytes:
    # repr() is the shortest round-tripping decimal form of a float
    lines = [",".join(LOGIT_COLUMNS)]
    for r in records:
        lines.append(
            f"{r.run_id},{r.model},{r.split_index},{r.subset},{r.image_id},"
            f"{r.logit_negative!r},{r.logit_positive!r},{r.true_label}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_logit_csv(path) -> list[LogitRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != LOGIT_COLUMNS:
            raise DataError(f"{path}: unexpected logit cache header {reader.fieldnames}")
        for row in reader:
            out.append(
                LogitRecord(
                    image_id=row["image_id"],
                    model=row["model"],
                    split_index=int(row["split_index"]),
                    subset=row["subset"],
                    logit_negative=float(row["logit_negative"]),
                    logit_positive=float(row["logit_positive"]),
                    true_label=row["true_label"],
                    run_id=row["run_id"],
                )
            )
    return out


@dataclass(frozen=True)
class _Block:
    image_ids: tuple[str, ...]
    logits: np.ndarray  # (n, 2): negative, positive
    labels: np.ndarray  # (n,) class index, 1 = positive


class LogitCache:
    """Immutable index of logit records keyed by (model, split_index, subset)."""

    def __init__(self, records: Iterable[LogitRecord] = ()):
        groups: dict[tuple[str, int, str], list[LogitRecord]] = defaultdict(list)
        for r in records:
            groups[(r.model, r.split_index, r.subset)].append(r)
        self._blocks: dict[tuple[str, int, str], _Block] = {}
        for key, recs in groups.items():
            recs.sort(key=lambda r: r.image_id)
            ids = tuple(r.image_id for r in recs)
            if len(set(ids)) != len(ids):
                raise DataError(f"duplicate image ids in logit cache block {key}")
            self._blocks[key] = _Block(
                ids,
                np.array([r.logits for r in recs], dtype=np.float64).reshape(-1, 2),
                np.array([LABELS.index(r.true_label) for r in recs], dtype=np.int64),
            )

    @classmethod
    def from_files(cls, paths: Iterable) -> "LogitCache":
        records: list[LogitRecord] = []
        for p in paths:
            records.extend(read_logit_csv(p))
        return cls(records)

    def __len__(self) -> int:
        return sum(len(b.image_ids) for b in self._blocks.values())

    def has(self, model: str, split_index: int, subset: str) -> bool:
        return (model, split_index, subset) in self._blocks

    def block(self, model: str, split_index: int, subset: str) -> _Block:
        try:
            return self._blocks[(model, split_index, subset)]
        except KeyError:
            raise DataError(f"logit cache is missing {model} instance {split_index} ({subset})") from None

    def models(self) -> list[str]:
        return sorted({k[0] for k in self._blocks})

    def require(self, members: Iterable[tuple[str, int]], subset: str = "test") -> None:
        missing = [(m, i) for m, i in members if (m, i, subset) not in self._blocks]
        if missing:
            listed = ", ".join(f"({m}, {i})" for m, i in missing)
            raise DataError(f"logit cache incomplete on {subset!r}; missing (model, instance): {listed}")


# ---------------------------------------------------------------------------
# averaging and decisions
# ---------------------------------------------------------------------------


def combine_logits(members) -> tuple[float, float]:
    """Elementwise mean of one image's logit pairs across members.

    ``members`` holds ``(logit_negative, logit_positive)`` pairs or
    :class:`LogitRecord` objects; records must all refer to the same image.
    """
    members = list(members)
    if not members:
        raise ValidationError("cannot combine an empty member list")
    if isinstance(members[0], LogitRecord):
        ids = {m.image_id for m in members}
        if len(ids) > 1:
            raise DataError(f"members refer to different images: {sorted(ids)}")
        pairs = [m.logits for m in members]
    else:
        pairs = [tuple(m) for m in members]
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"expected logit pairs, got shape {arr.shape}")
    mean = arr.mean(axis=0)
    return float(mean[0]), float(mean[1])


@dataclass(frozen=True)
class DecisionRule:
    """Argmax over the two logits; ``tie`` names the label an exact tie gets."""

    tie: str = POSITIVE

    def __post_init__(self):
        if self.tie not in LABELS:
            raise ValidationError(f"tie label must be one of {LABELS}, got {self.tie!r}")

    def predict(self, logits: np.ndarray) -> np.ndarray:
        """Class indices (1 = positive) for an ``(n, 2)`` logit array."""
        neg, pos = logits[:, 0], logits[:, 1]
        if self.tie == POSITIVE:
            return (pos >= neg).astype(np.int64)
        return (pos > neg).astype(np.int64)


def decide(logits, rule: DecisionRule = DecisionRule()) -> str:
    neg, pos = float(logits[0]), float(logits[1])
    if pos > neg:
        return POSITIVE
    if neg > pos:
        return NEGATIVE
    return rule.tie


def ensemble_logits(members: Sequence[tuple[str, int]], cache: LogitCache, subset: str = "test"):
    """Averaged ``(n, 2)`` logits, labels and image ids for an ensemble."""
    if not members:
        raise ValidationError("ensemble has no members")
    cache.require(members, subset)
    blocks = [cache.block(m, i, subset) for m, i in members]
    ref = blocks[0]
    for (m, i), b in zip(members, blocks):
        if b.image_ids != ref.image_ids:
            raise DataError(f"{m} instance {i} covers different {subset!r} images than {members[0]}")
        if not np.array_equal(b.labels, ref.labels):
            raise DataError(f"{m} instance {i} disagrees on true labels for {subset!r}")
    stacked = np.stack([b.logits for b in blocks])
    return stacked.mean(axis=0), ref.labels, ref.image_ids


def evaluate_members(
    members: Sequence[tuple[str, int]],
    cache: LogitCache,
    subset: str = "test",
    rule: DecisionRule = DecisionRule(),
) -> MetricSet:
    logits, labels, _ = ensemble_logits(members, cache, subset)
    return metric_set(confusion_from_arrays(labels, rule.predict(logits)))


# ---------------------------------------------------------------------------
# ranking and gains
# ---------------------------------------------------------------------------


def _means_of(stats) -> Mapping[str, float]:
    if isinstance(stats, AggregateStats):
        return stats.means()
    return stats


def rank_models(stats: Mapping[str, AggregateStats | Mapping[str, float]]) -> list[str]:
    """Models by descending mean F1, then descending mean ACC, then name."""

    def key(name):
        m = _means_of(stats[name])
        return (-m["f1"], -m["acc"], name)

    return sorted(stats, key=key)


@dataclass(frozen=True)
class GainEntry:
    baseline_mean: float
    ensemble_value: float
    gain: float  # percent


@dataclass(frozen=True)
class GainReport:
    acc: GainEntry
    tpr: GainEntry
    ppv: GainEntry
    f1: GainEntry

    def gains(self) -> dict[str, float]:
        return {m: getattr(self, m).gain for m in METRICS}


def relative_gain(value: float, baseline: float) -> float:
    """Percentage change of ``value`` relative to ``baseline``."""
    if baseline == 0:
        return math.nan
    return (value / baseline - 1.0) * 100.0


def gain_report(ensemble: MetricSet | Mapping[str, float], baseline: AggregateStats | Mapping[str, float]) -> GainReport:
    values = ensemble.as_dict() if isinstance(ensemble, MetricSet) else ensemble
    base = _means_of(baseline)
    return GainReport(
        **{m: GainEntry(base[m], values[m], relative_gain(values[m], base[m])) for m in METRICS}
    )


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[tuple[str, int], ...]
    kind: str

    def __post_init__(self):
        if not self.members:
            raise ValidationError("ensemble needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValidationError(f"duplicate ensemble members in {self.members}")
        models = {m for m, _ in self.members}
        splits = {i for _, i in self.members}
        if self.kind == "homogeneous" and (len(models) != 1 or splits != set(range(1, N_SPLITS + 1))):
            raise ValidationError("homogeneous ensembles hold every instance of exactly one model")
        if self.kind == "heterogeneous_topk" and len(splits) != 1:
            raise ValidationError("heterogeneous ensembles share one split index")
        if self.kind == "singleton" and len(self.members) != 1:
            raise ValidationError("singleton ensembles have one member")
        if self.kind not in ("heterogeneous_topk", "homogeneous", "topk_all_instances", "singleton"):
            raise ValidationError(f"unknown ensemble kind {self.kind!r}")


def _top(k, ranking: Sequence[str]) -> list[str]:
    if k == "all":
        return list(ranking)
    k = int(k)
    if not 1 <= k <= len(ranking):
        raise ValidationError(f"k must lie in [1, {len(ranking)}], got {k}")
    return list(ranking[:k])


def run_heterogeneous_topk(
    k, ranking: Sequence[str], cache: LogitCache, rule: DecisionRule = DecisionRule()
) -> tuple[list[MetricSet], AggregateStats]:
    """Five ensembles, the i-th holding instance i of each of the top-k models."""
    models = _top(k, ranking)
    cache.require([(m, i) for m in models for i in range(1, N_SPLITS + 1)])
    sets = []
    for i in range(1, N_SPLITS + 1):
        spec = EnsembleSpec(tuple((m, i) for m in models), "heterogeneous_topk")
        sets.append(evaluate_members(spec.members, cache, "test", rule))
    return sets, aggregate(sets)


def single_instance_stats(model: str, cache: LogitCache, rule: DecisionRule = DecisionRule()) -> AggregateStats:
    cache.require([(model, i) for i in range(1, N_SPLITS + 1)])
    return aggregate([evaluate_members([(model, i)], cache, "test", rule) for i in range(1, N_SPLITS + 1)])


def run_homogeneous(
    model: str, cache: LogitCache, rule: DecisionRule = DecisionRule(), baseline: AggregateStats | None = None
) -> tuple[MetricSet, GainReport]:
    """All instances of one model in a single ensemble, with gains over the single-instance means."""
    spec = EnsembleSpec(tuple((model, i) for i in range(1, N_SPLITS + 1)), "homogeneous")
    cache.require(spec.members)
    result = evaluate_members(spec.members, cache, "test", rule)
    if baseline is None:
        baseline = single_instance_stats(model, cache, rule)
    return result, gain_report(result, baseline)


def run_topk_all_instances(
    k,
    ranking: Sequence[str],
    cache: LogitCache,
    rule: DecisionRule = DecisionRule(),
    baseline: AggregateStats | None = None,
) -> tuple[MetricSet, GainReport]:
    """Every instance of each top-k model in one ensemble.

    Gains are relative to the heterogeneous top-k means (computed here when
    ``baseline`` is not supplied).
    """
    models = _top(k, ranking)
    spec = EnsembleSpec(tuple((m, i) for m in models for i in range(1, N_SPLITS + 1)), "topk_all_instances")
    cache.require(spec.members)
    result = evaluate_members(spec.members, cache, "test", rule)
    if baseline is None:
        _, baseline = run_heterogeneous_topk(k, ranking, cache, rule)
    return result, gain_report(result, baseline)


def topk_configurations(n_models: int) -> list:
    """``k`` values for the top-k tables: 2..min(7, n), then ``"all"`` if n > 7."""
    ks: list = list(range(2, min(MAX_TOPK, n_models) + 1))
    if n_models > MAX_TOPK:
        ks.append("all")
    return ks


def configuration_label(k) -> str:
    return "All models" if k == "all" else f"Top {k} models"
