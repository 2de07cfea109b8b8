"""Train three stub backbones on a synthetic image set and print every table.

    python3 demos/desk_benchmark.py [--out /tmp/cxr-desk] [--difficulty 0.3]

Fifteen instances (three widths x five splits) take a few minutes on a CPU.
Rerunning with the same --out resumes and reproduces the reports byte for byte.
"""

import argparse
import logging
from pathlib import Path

from cxrbench.experiment import RunConfig, run_experiment
from cxrbench.store import Store
from cxrbench.synthetic import generate_synthetic
from cxrbench.trainer import TrainConfig

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="/tmp/cxr-desk")
parser.add_argument("--difficulty", type=float, default=0.3)
parser.add_argument("--max-epochs", type=int, default=50)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

out = Path(args.out)
entries = generate_synthetic(out / "data", 240, 32, seed=1, difficulty=args.difficulty, n_test_per_class=40)
print(f"{len(entries)} synthetic images under {out / 'data'}")

config = RunConfig(
    run_id="desk",
    manifest_path=str(out / "data" / "manifest.tsv"),
    model_names=("stub", "stub@24", "stub@16"),
    output_root=str(out / "runs"),
    train=TrainConfig(max_epochs=args.max_epochs, patience=min(10, args.max_epochs - 1)),
)
code = run_experiment(config)
print(f"exit code {code}")

# the text renderings sit next to the CSVs
store = Store(config.output_root, config.run_id)
for path in sorted(store.reports_dir.glob("*.txt")):
    print()
    print(path.read_text())
