"""Published COVIDx8B benchmark values, for comparison tables and sanity checks.

Each CSV holds one results table as released: single-model mean/SD over five
instances, heterogeneous top-k ensembles, homogeneous ensembles and top-k
all-instance ensembles (value and percentage gain), per-subset metrics, and
the backbone characteristics.
"""

from __future__ import annotations

import csv
from importlib import resources

TABLES = (
    "backbones",
    "single_models",
    "heterogeneous_ensembles",
    "homogeneous_ensembles",
    "topk_all_instances",
    "subsets_acc",
    "subsets_tpr",
    "subsets_ppv",
    "subsets_f1",
)


def load_table(name: str, include_average: bool = False) -> dict[str, dict[str, float | str]]:
    """Rows keyed by their first column, numeric cells converted to float."""
    if name not in TABLES:
        raise KeyError(f"unknown published table {name!r}; choose from {TABLES}")
    text = resources.files(__name__).joinpath(f"{name}.csv").read_text(encoding="utf-8")
    reader = csv.DictReader(text.splitlines())
    key = reader.fieldnames[0]
    out = {}
    for row in reader:
        label = row.pop(key)
        if label == "Average" and not include_average:
            continue
        out[label] = {k: _num(v) for k, v in row.items()}
    return out


def _num(v: str):
    try:
        return float(v)
    except ValueError:
        return v
