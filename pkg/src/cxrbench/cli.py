"""Command line entry point: ``cxrbench <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 data error, 3 training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .dataset import (
    check_patient_disjoint,
    check_unique_ids,
    load_manifest,
    write_manifest,
)
from .errors import CxrBenchError
from .experiment import (
    ROOT_ENV,
    RunConfig,
    build_run_config,
    error_summary,
    load_config,
    open_run,
    parse_seeds,
    run_experiment,
    run_training,
    write_error_summary,
)
from .model_zoo import registry_tsv
from .reports import emit_reports
from .store import RunLock
from .synthetic import generate_synthetic


def _global_flags(default=None) -> argparse.ArgumentParser:
    # subcommands get SUPPRESS defaults so they do not clobber flags given before the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=default)
    g = p.add_argument_group("run selection")
    g.add_argument("--config", help="flat key = value run config")
    g.add_argument("--run-id")
    g.add_argument("--output-root", help=f"store root (default ${ROOT_ENV} or ./runs)")
    g.add_argument("--models", help="comma-separated backbone names")
    g.add_argument("--seeds", help="five split seeds: a comma list or a range such as 1..5")
    g.add_argument("--manifest")
    g.add_argument("--manifest-format", choices=("tsv", "covidx_txt"))
    g.add_argument("--val-fraction")
    g.add_argument("--max-epochs")
    g.add_argument("--patience")
    g.add_argument("--batch-size")
    g.add_argument("--init", choices=("auto", "pretrained", "random"))
    g.add_argument("--device")
    g.add_argument("--workers")
    g.add_argument("--tie-label", choices=("positive", "negative"))
    g.add_argument("-v", "--verbose", action="store_true", default=default if default is not None else False)
    return p


_OVERRIDES = {
    "run_id": "run_id",
    "output_root": "output_root",
    "models": "models",
    "seeds": "seeds",
    "manifest": "manifest",
    "manifest_format": "manifest_format",
    "val_fraction": "val_fraction",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "batch_size": "batch_size",
    "init": "init",
    "device": "device",
    "workers": "workers",
    "tie_label": "tie_label",
}


def expand_seeds(text: str) -> str:
    """``"1..5"`` -> ``"1,2,3,4,5"``; comma lists pass through."""
    return ",".join(str(s) for s in parse_seeds(text))


def resolve_config(args) -> RunConfig:
    overrides = {key: getattr(args, attr, None) for attr, key in _OVERRIDES.items()}
    if args.seeds:
        overrides["seeds"] = expand_seeds(args.seeds)
    if not overrides.get("output_root") and os.environ.get(ROOT_ENV):
        overrides["output_root"] = os.environ[ROOT_ENV]
    if args.config:
        return load_config(args.config, overrides)
    return build_run_config({k: v for k, v in overrides.items() if v is not None})


def _cmd_synth(args) -> int:
    entries = generate_synthetic(
        args.out, args.n_per_class, args.image_size, args.seed, args.difficulty, n_test_per_class=args.n_test_per_class
    )
    print(f"wrote {len(entries)} images and {Path(args.out) / 'manifest.tsv'}")
    return 0


def _cmd_make_manifest(args) -> int:
    entries = []
    for path in args.input:
        entries.extend(load_manifest(path, args.format, subset=args.subset, image_root=args.image_root))
    check_unique_ids(entries)
    check_patient_disjoint(entries)
    write_manifest(entries, args.out)
    print(f"wrote {len(entries)} entries to {args.out}")
    return 0


def _cmd_registry(args) -> int:
    sys.stdout.write(registry_tsv())
    return 0


def _cmd_train(args) -> int:
    config = resolve_config(args)
    store = open_run(config)
    with RunLock(store.root):
        result = run_training(config, store)
    print(json.dumps(result.summary(), indent=2))
    if not result.complete:
        summary = {"error": "TrainingError", "message": "some instances failed", "exit_code": 3, **result.summary()}
        write_error_summary(store, summary)
        _print_error(summary)
        return 3
    return 0


def _reports(tables):
    def run(args) -> int:
        config = resolve_config(args)
        store = open_run(config)
        for path in emit_reports(store, config.model_names, config.rule, tables):
            print(path)
        return 0

    return run


def _print_error(summary: dict) -> None:
    print(json.dumps(summary), file=sys.stderr)


def _cmd_run(args) -> int:
    return run_experiment(resolve_config(args), on_error=_print_error)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrbench", description=__doc__, parents=[_global_flags()])
    common = _global_flags(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic two-class image set")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=240)
    p.add_argument("--n-test-per-class", type=int)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=0.3)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("make-manifest", parents=[common], help="convert COVIDx list files into a TSV manifest")
    p.add_argument("--input", action="append", required=True, help="list file; repeat for train and test")
    p.add_argument("--format", default="covidx_txt", choices=("tsv", "covidx_txt"))
    p.add_argument("--subset", choices=("train", "test"), help="default: inferred from each file name")
    p.add_argument("--image-root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_manifest)

    sub.add_parser("train", parents=[common], help="build splits and train every model instance").set_defaults(func=_cmd_train)
    sub.add_parser("evaluate", parents=[common], help="single-model and per-subset tables").set_defaults(
        func=_reports(("single", "subsets"))
    )
    sub.add_parser("ensemble", parents=[common], help="ensemble tables").set_defaults(
        func=_reports(("heterogeneous", "homogeneous", "topk_all"))
    )
    sub.add_parser("report", parents=[common], help="every table").set_defaults(
        func=_reports(("single", "subsets", "heterogeneous", "homogeneous", "topk_all"))
    )
    sub.add_parser("registry", parents=[common], help="print the backbone registry as TSV").set_defaults(func=_cmd_registry)
    sub.add_parser("run", parents=[common], help="train, evaluate, ensemble and report in one go").set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CxrBenchError as e:
        _print_error(error_summary(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
