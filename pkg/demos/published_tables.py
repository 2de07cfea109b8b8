"""Recompute the released ranking and ensemble gains from the shipped tables.

    python3 demos/published_tables.py

Single-model means drive the F1 ranking and the top-k membership; the gain of
an ensemble is its value relative to the mean of the models it replaces.
"""

from cxrbench.ensemble import gain_report, rank_models, topk_configurations
from cxrbench.metrics import METRICS
from cxrbench.published import load_table
from cxrbench.reports import format_gain

single = load_table("single_models")
means = {name: {m: row[f"{m}_mean"] for m in METRICS} for name, row in single.items()}
ranking = rank_models(means)

print("rank  model               F1      ACC")
for i, name in enumerate(ranking, start=1):
    print(f"{i:>4}  {name:<18}  {means[name]['f1']:.4f}  {means[name]['acc']:.4f}")
print("top-k configurations:", topk_configurations(len(ranking)))

# homogeneous ensembles against their single-model baselines
print()
print("model               ACC gain  F1 gain   (recomputed / released)")
homo = load_table("homogeneous_ensembles")
worst = 0.0
for name in ranking:
    row = homo[name]
    rep = gain_report({m: row[f"{m}_value"] for m in METRICS}, means[name])
    for m in METRICS:
        worst = max(worst, abs(getattr(rep, m).gain - row[f"{m}_gain_pct"]))
    print(
        f"{name:<18}  {format_gain(rep.acc.gain):>7} / {row['acc_gain_pct']:.2f}%"
        f"  {format_gain(rep.f1.gain):>7} / {row['f1_gain_pct']:.2f}%"
    )
print(f"largest gain discrepancy: {worst:.4f} percentage points")
