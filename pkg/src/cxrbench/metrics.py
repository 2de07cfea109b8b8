"""Confusion counts, ACC/TPR/PPV/F1, and mean/SD across repetitions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import NEGATIVE, POSITIVE
from .errors import DataError, ValidationError

METRICS = ("acc", "tpr", "ppv", "f1")
EVAL_SUBSETS = ("train", "validation", "test")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricSet:
    acc: float
    tpr: float
    ppv: float
    f1: float
    degenerate: bool = False

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass(frozen=True)
class Stat:
    mean: float
    sd: float


@dataclass(frozen=True)
class AggregateStats:
    acc: Stat
    tpr: Stat
    ppv: Stat
    f1: Stat
    n: int

    def mean(self, metric: str) -> float:
        return getattr(self, metric).mean

    def sd(self, metric: str) -> float:
        return getattr(self, metric).sd

    def means(self) -> dict[str, float]:
        return {m: self.mean(m) for m in METRICS}


def confusion(records: Iterable[tuple[str, str]]) -> ConfusionCounts:
    """Tally ``(true_label, predicted_label)`` pairs; positive is the COVID class."""
    tp = fp = tn = fn = 0
    n = 0
    for true, pred in records:
        n += 1
        if true not in (NEGATIVE, POSITIVE) or pred not in (NEGATIVE, POSITIVE):
            raise ValidationError(f"non-binary label pair {(true, pred)!r}")
        if true == POSITIVE:
            if pred == POSITIVE:
                tp += 1
            else:
                fn += 1
        elif pred == POSITIVE:
            fp += 1
        else:
            tn += 1
    if n == 0:
        raise ValidationError("cannot build a confusion table from zero records")
    return ConfusionCounts(tp, fp, tn, fn)


def confusion_from_arrays(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionCounts:
    """Vectorised :func:`confusion` for 0/1 class-index arrays (1 = positive)."""
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.size == 0:
        raise ValidationError("cannot build a confusion table from zero records")
    return ConfusionCounts(
        tp=int(np.sum(y_true & y_pred)),
        fp=int(np.sum(~y_true & y_pred)),
        tn=int(np.sum(~y_true & ~y_pred)),
        fn=int(np.sum(y_true & ~y_pred)),
    )


def metric_set(c: ConfusionCounts) -> MetricSet:
    """ACC, TPR, PPV and F1.

    A zero denominator yields 0 for that metric and sets ``degenerate``.
    """
    if c.total <= 0:
        raise ValidationError("confusion table is empty")
    degenerate = False
    acc = (c.tp + c.tn) / c.total
    if c.tp + c.fn:
        tpr = c.tp / (c.tp + c.fn)
    else:
        tpr, degenerate = 0.0, True
    if c.tp + c.fp:
        ppv = c.tp / (c.tp + c.fp)
    else:
        ppv, degenerate = 0.0, True
    f1 = 2 * tpr * ppv / (tpr + ppv) if tpr + ppv > 0 else 0.0
    return MetricSet(acc, tpr, ppv, f1, degenerate)


def aggregate(metric_sets: Sequence[MetricSet]) -> AggregateStats:
    """Per-metric mean and sample standard deviation (n - 1 divisor)."""
    n = len(metric_sets)
    if n < 2:
        raise ValidationError(f"need at least 2 metric sets for a standard deviation, got {n}")
    values = np.array([[getattr(s, m) for m in METRICS] for s in metric_sets], dtype=np.float64)
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    stats = {m: Stat(float(mean[i]), float(sd[i])) for i, m in enumerate(METRICS)}
    return AggregateStats(n=n, **stats)


def average_row(rows: Sequence[Mapping[str, float]]) -> dict[str, float]:
    """Column means over table rows, as in the summary line under each table."""
    if not rows:
        raise ValidationError("no rows to average")
    keys = rows[0].keys()
    return {k: math.fsum(r[k] for r in rows) / len(rows) for k in keys}


def evaluate_subsets(instance, logit_cache, decision_rule=None) -> dict[str, MetricSet]:
    """Metrics of one trained instance on its train, validation and test subsets.

    ``instance`` is anything with ``model_name`` and ``split_index``
    attributes. Each subset is evaluated as a single-member ensemble.
    """
    from .ensemble import DecisionRule, evaluate_members

    rule = decision_rule or DecisionRule()
    member = (instance.model_name, instance.split_index)
    out = {}
    for subset in EVAL_SUBSETS:
        if not logit_cache.has(instance.model_name, instance.split_index, subset):
            raise DataError(
                f"logit cache has no {subset!r} records for {instance.model_name} instance {instance.split_index}"
            )
        out[subset] = evaluate_members([member], logit_cache, subset=subset, rule=rule)
    return out
