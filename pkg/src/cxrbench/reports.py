"""CSV and aligned-text tables for single models, ensembles and per-subset metrics.

Values print at 4 decimals and gains as percentages at 2 decimals. Nothing
time- or host-dependent is written, so identical inputs give identical bytes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .dataset import N_SPLITS
from .ensemble import (
    DecisionRule,
    GainReport,
    LogitCache,
    configuration_label,
    rank_models,
    run_heterogeneous_topk,
    run_homogeneous,
    run_topk_all_instances,
    topk_configurations,
)
from .errors import DataError
from .metrics import EVAL_SUBSETS, METRICS, AggregateStats, MetricSet, aggregate, average_row, evaluate_subsets

log = logging.getLogger(__name__)

TABLE_FILES = {
    "single": "table3_single_models",
    "heterogeneous": "table5_heterogeneous_topk",
    "homogeneous": "table6_homogeneous",
    "topk_all": "table7_topk_all_instances",
    "subsets_acc": "table8_subsets_acc",
    "subsets_tpr": "table9_subsets_tpr",
    "subsets_ppv": "table10_subsets_ppv",
    "subsets_f1": "table11_subsets_f1",
}
ALL_TABLES = ("single", "subsets", "heterogeneous", "homogeneous", "topk_all")


def fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def format_gain(pct: float) -> str:
    """``1.12071`` -> ``"1.12%"``; negative zero prints as ``0.00%``."""
    if math.isnan(pct):
        return "n/a"
    s = f"{pct:.2f}"
    if s == "-0.00":
        s = "0.00"
    return s + "%"


@dataclass
class Table:
    title: str
    header: list[str]
    rows: list[list[str]]
    notes: tuple[str, ...] = ()

    def csv(self) -> str:
        lines = [",".join(self.header)] + [",".join(r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        cols = list(zip(self.header, *self.rows)) if self.rows else [(h,) for h in self.header]
        widths = [max(len(c) for c in col) for col in cols]

        def line(cells):
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join([first] + rest).rstrip()

        rule = "-" * len(line(self.header))
        out = [self.title, *self.notes, rule, line(self.header), rule]
        body = self.rows
        if body and body[-1][0] == "Average":
            out += [line(r) for r in body[:-1]] + [rule, line(body[-1])]
        else:
            out += [line(r) for r in body]
        out.append(rule)
        return "\n".join(out) + "\n"


def _stat_header(first: str) -> list[str]:
    return [first] + [f"{m.upper()} {s}" for m in METRICS for s in ("mean", "sd")]


def _stat_cells(stats: AggregateStats | Mapping[str, float]) -> list[str]:
    if isinstance(stats, AggregateStats):
        return [fmt(x) for m in METRICS for x in (stats.mean(m), stats.sd(m))]
    return [fmt(stats[f"{m}_{s}"]) for m in METRICS for s in ("mean", "sd")]


def _flat(stats: AggregateStats) -> dict[str, float]:
    return {f"{m}_{s}": getattr(getattr(stats, m), s) for m in METRICS for s in ("mean", "sd")}


def single_model_table(stats: Mapping[str, AggregateStats]) -> Table:
    """Mean/SD per model over its instances, sorted by descending mean F1."""
    order = rank_models(stats)
    rows = [[name] + _stat_cells(stats[name]) for name in order]
    if order:
        rows.append(["Average"] + _stat_cells(average_row([_flat(stats[n]) for n in order])))
    return Table(f"Single models (test subset, {N_SPLITS} instances each)", _stat_header("Model"), rows)


def heterogeneous_table(results: Sequence[tuple[str, AggregateStats]], rule: DecisionRule | None = None) -> Table:
    rows = [[label] + _stat_cells(stats) for label, stats in results]
    notes = (f"decision tie rule: {rule.tie}",) if rule else ()
    return Table("Heterogeneous top-k ensembles (one instance per model, five ensembles)", _stat_header("Models"), rows, notes)


def gain_table(title: str, results: Sequence[tuple[str, GainReport]], first: str = "Models", rule: DecisionRule | None = None) -> Table:
    header = [first] + [f"{m.upper()} {s}" for m in METRICS for s in ("value", "gain")]
    rows = []
    for label, rep in results:
        cells = [label]
        for m in METRICS:
            e = getattr(rep, m)
            cells += [fmt(e.ensemble_value), format_gain(e.gain)]
        rows.append(cells)
    if results:
        avg = average_row(
            [{**{f"{m}_v": getattr(r, m).ensemble_value for m in METRICS},
              **{f"{m}_g": getattr(r, m).gain for m in METRICS}} for _, r in results]
        )
        rows.append(["Average"] + [x for m in METRICS for x in (fmt(avg[f"{m}_v"]), format_gain(avg[f"{m}_g"]))])
    notes = (f"decision tie rule: {rule.tie}",) if rule else ()
    return Table(title, header, rows, notes)


def subset_table(metric: str, per_model: Mapping[str, Mapping[str, float]]) -> Table:
    """Mean of one metric per subset, sorted by descending test value."""
    order = sorted(per_model, key=lambda n: (-per_model[n]["test"], n))
    rows = [[n] + [fmt(per_model[n][s]) for s in EVAL_SUBSETS] for n in order]
    return Table(f"{metric.upper()} per subset (mean over instances)", ["Model", "Train", "Validation", "Test"], rows)


# ---------------------------------------------------------------------------
# store-driven emission
# ---------------------------------------------------------------------------


@dataclass
class InstanceRef:
    model_name: str
    split_index: int


def _check_complete(cache: LogitCache, models: Sequence[str]) -> None:
    missing = [
        (m, i)
        for m in models
        for i in range(1, N_SPLITS + 1)
        if not all(cache.has(m, i, s) for s in EVAL_SUBSETS)
    ]
    if missing:
        listed = ", ".join(f"({m}, {i})" for m, i in missing)
        raise DataError(f"cannot build reports; absent (model, instance) pairs: {listed}")


def compute_tables(cache: LogitCache, models: Sequence[str], rule: DecisionRule = DecisionRule(), tables=ALL_TABLES) -> dict[str, Table]:
    _check_complete(cache, models)
    out: dict[str, Table] = {}

    per_subset: dict[str, dict[str, list[MetricSet]]] = {m: {s: [] for s in EVAL_SUBSETS} for m in models}
    for m in models:
        for i in range(1, N_SPLITS + 1):
            for s, ms in evaluate_subsets(InstanceRef(m, i), cache, rule).items():
                per_subset[m][s].append(ms)
    single = {m: aggregate(per_subset[m]["test"]) for m in models}
    ranking = rank_models(single)

    if "single" in tables:
        out["single"] = single_model_table(single)
    if "subsets" in tables:
        for metric in METRICS:
            means = {
                m: {s: math.fsum(getattr(x, metric) for x in per_subset[m][s]) / N_SPLITS for s in EVAL_SUBSETS}
                for m in models
            }
            out[f"subsets_{metric}"] = subset_table(metric, means)

    ks = topk_configurations(len(models))
    hetero = {k: run_heterogeneous_topk(k, ranking, cache, rule)[1] for k in ks} if ks else {}
    if "heterogeneous" in tables:
        out["heterogeneous"] = heterogeneous_table([(configuration_label(k), hetero[k]) for k in ks], rule)
    if "homogeneous" in tables:
        res = [(m, run_homogeneous(m, cache, rule, baseline=single[m])[1]) for m in ranking]
        out["homogeneous"] = gain_table("Homogeneous ensembles (all instances of one model)", res, "Model", rule)
    if "topk_all" in tables:
        res = [(configuration_label(k), run_topk_all_instances(k, ranking, cache, rule, baseline=hetero[k])[1]) for k in ks]
        out["topk_all"] = gain_table("Top-k ensembles using every instance of each model", res, "Models", rule)
    return out


def write_tables(store, tables: Mapping[str, Table]) -> list:
    written = []
    for key, table in tables.items():
        stem = TABLE_FILES[key]
        written.append(store.commit(table.csv(), store.reports_dir / f"{stem}.csv"))
        written.append(store.commit(table.text(), store.reports_dir / f"{stem}.txt"))
    return written


def emit_reports(store, models: Sequence[str] | None = None, rule: DecisionRule = DecisionRule(), tables=ALL_TABLES) -> list:
    """Build the requested tables from a store's logit caches and commit them under ``reports/``."""
    cache = LogitCache.from_files(store.logit_files(models))
    if models is None:
        models = cache.models()
    if not models:
        raise DataError(f"no completed instances under {store.root}")
    return write_tables(store, compute_tables(cache, list(models), rule, tables))
