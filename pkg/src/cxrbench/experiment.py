"""Run configuration and the end-to-end experiment driver."""

from __future__ import annotations

import configparser
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import (
    N_SPLITS,
    ClassWeights,
    SplitPlan,
    build_splits,
    check_patient_disjoint,
    load_manifest,
)
from .ensemble import DecisionRule
from .errors import CxrBenchError, ValidationError
from .model_zoo import registry_lookup
from .reports import ALL_TABLES, emit_reports
from .store import RunLock, Store, check_run_id
from .trainer import SuiteResult, TrainConfig, train_suite

log = logging.getLogger(__name__)

ROOT_ENV = "CXRBENCH_ROOT"

# config keys that map straight onto TrainConfig fields
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "class_weights"}


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    manifest_path: str
    model_names: tuple[str, ...]
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    val_fraction: float = 0.2
    output_root: str = "runs"
    manifest_format: str = "tsv"
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 1
    tie_label: str = "positive"

    def __post_init__(self):
        check_run_id(self.run_id)
        if len(self.seeds) != N_SPLITS:
            raise ValidationError(f"expected {N_SPLITS} seeds, got {len(self.seeds)}")
        if len(set(self.seeds)) != N_SPLITS:
            raise ValidationError(f"seeds must be distinct, got {self.seeds}")
        if not self.model_names:
            raise ValidationError("no models configured")
        if len(set(self.model_names)) != len(self.model_names):
            raise ValidationError(f"duplicate model names in {self.model_names}")
        for m in self.model_names:
            registry_lookup(m)
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        DecisionRule(self.tie_label)

    @property
    def rule(self) -> DecisionRule:
        return DecisionRule(self.tie_label)

    def to_text(self) -> str:
        t = self.train
        lines = [
            f"run_id = {self.run_id}",
            f"manifest = {self.manifest_path}",
            f"manifest_format = {self.manifest_format}",
            f"models = {','.join(self.model_names)}",
            f"seeds = {','.join(str(s) for s in self.seeds)}",
            f"val_fraction = {self.val_fraction!r}",
            f"output_root = {self.output_root}",
            f"workers = {self.workers}",
            f"tie_label = {self.tie_label}",
        ]
        for name in _TRAIN_KEYS:
            lines.append(f"{name} = {_to_str(getattr(t, name))}")
        if t.class_weights is not None:
            lines.append(f"class_weight_negative = {t.class_weights.w_negative!r}")
            lines.append(f"class_weight_positive = {t.class_weights.w_positive!r}")
        return "\n".join(lines) + "\n"


def _to_str(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str, typ):
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return raw.strip()
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from None


KNOWN_KEYS = {
    "run_id", "manifest", "manifest_format", "models", "seeds", "val_fraction", "output_root",
    "workers", "tie_label", "class_weight_negative", "class_weight_positive", *_TRAIN_KEYS,
}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines with ``#`` comments into a dict of strings."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",))
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ValidationError(f"malformed config: {e}") from None
    values = dict(cp["run"])
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    return values


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1,2,3,4,5"`` or the inclusive range ``"1..5"`` -> ``(1, 2, 3, 4, 5)``."""
    try:
        if ".." in text:
            lo, _, hi = text.partition("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ValidationError(f"seeds must be comma-separated integers or a range like 1..5, got {text!r}") from None


def build_run_config(values: dict[str, str], base_dir: str | Path | None = None) -> RunConfig:
    """Assemble a :class:`RunConfig` from flat string values (file keys or CLI overrides)."""
    v = dict(values)
    for req in ("run_id", "manifest", "models"):
        if not v.get(req):
            raise ValidationError(f"missing required config key {req!r}")
    manifest = v["manifest"]
    if base_dir is not None and not os.path.isabs(manifest):
        manifest = str(Path(base_dir) / manifest)

    train_kwargs = {k: _parse_value(k, v[k], typ) for k, typ in _TRAIN_KEYS.items() if k in v}
    if "class_weight_negative" in v or "class_weight_positive" in v:
        try:
            train_kwargs["class_weights"] = ClassWeights(
                float(v["class_weight_negative"]), float(v["class_weight_positive"])
            )
        except (KeyError, ValueError):
            raise ValidationError("class_weight_negative and class_weight_positive must both be numbers") from None

    seeds = parse_seeds(v.get("seeds", "1,2,3,4,5"))

    return RunConfig(
        run_id=v["run_id"],
        manifest_path=manifest,
        model_names=tuple(m.strip() for m in v["models"].split(",") if m.strip()),
        seeds=seeds,
        val_fraction=_parse_value("val_fraction", v.get("val_fraction", "0.2"), float),
        output_root=v.get("output_root") or os.environ.get(ROOT_ENV, "runs"),
        manifest_format=v.get("manifest_format", "tsv"),
        train=TrainConfig(**train_kwargs),
        workers=_parse_value("workers", v.get("workers", "1"), int),
        tie_label=v.get("tie_label", "positive"),
    )


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}") from None
    values = parse_config_text(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(values, base_dir=path.parent)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def open_run(config: RunConfig) -> Store:
    """Create or reopen the run store; a reused run_id must carry the same config."""
    store = Store(config.output_root, config.run_id)
    text = config.to_text()
    if store.config_path.exists():
        if store.config_path.read_text(encoding="utf-8") != text:
            raise ValidationError(
                f"run {config.run_id!r} already exists under {config.output_root} with a different config"
            )
    else:
        store.commit(text, store.config_path)
    return store


def prepare_splits(config: RunConfig, store: Store):
    manifest = load_manifest(config.manifest_path, config.manifest_format)
    check_patient_disjoint(manifest)
    plans = build_splits(manifest, config.val_fraction, config.seeds)
    for p in plans:
        path = store.split_path(p.split_index)
        if path.exists() and SplitPlan.from_dict(store.read_json(path)) != p:
            raise ValidationError(f"stored split {p.split_index} differs from the one rebuilt from the manifest")
        store.commit_json(p.to_dict(), path)
    return manifest, plans


def run_training(config: RunConfig, store: Store) -> SuiteResult:
    manifest, plans = prepare_splits(config, store)
    return train_suite(config.model_names, plans, config.train, manifest, store, workers=config.workers)


def write_error_summary(store: Store | None, err: dict) -> None:
    if store is not None:
        store.commit_json(err, store.root / "errors.json")


def error_summary(exc: BaseException) -> dict:
    code = getattr(exc, "exit_code", 1)
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": code}


def run_experiment(config: RunConfig, tables=ALL_TABLES, on_error=None) -> int:
    """Splits, training, evaluation, ensembles and reports. Returns an exit status.

    Reruns reuse every completed instance, so an interrupted run resumes
    where it stopped. On failure the error summary is written to
    ``errors.json`` in the run root and passed to ``on_error`` if given.
    """
    report = on_error or (lambda summary: log.error("%s", json.dumps(summary)))
    store = None
    try:
        store = open_run(config)
        with RunLock(store.root):
            result = run_training(config, store)
            if not result.complete:
                summary = {"error": "TrainingError", "message": "some instances failed", "exit_code": 3, **result.summary()}
                write_error_summary(store, summary)
                report(summary)
                return 3
            emit_reports(store, config.model_names, config.rule, tables)
            (store.root / "errors.json").unlink(missing_ok=True)
        return 0
    except CxrBenchError as e:
        summary = error_summary(e)
        try:
            write_error_summary(store, summary)
        except CxrBenchError:
            pass
        report(summary)
        return e.exit_code


def with_train_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, train=replace(config.train, **kw))
