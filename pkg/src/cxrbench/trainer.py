"""Training protocol: weighted loss, two learning rates, early stopping.

One call to :func:`train_instance` is one repetition on one split plan;
:func:`train_suite` runs every model on every plan, persists the artifacts
and the per-image logits, and resumes from whatever the store already holds.
"""

from __future__ import annotations

import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import multiprocessing as mp
import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .dataset import (
    N_SPLITS,
    ClassWeights,
    DatasetCounts,
    ManifestEntry,
    SplitPlan,
    compute_class_weights,
    label_index,
    subset_entries,
)
from .ensemble import LogitRecord, logit_csv_bytes
from .errors import CxrBenchError, DataError, TrainingError, ValidationError
from .model_zoo import BackboneSpec, HeadSpec, TransferClassifier, build_classifier, preprocess, registry_lookup
from .store import Store, sha256_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    patience: int = 10
    lr_backbone: float = 1e-5
    lr_head: float = 1e-3
    batch_size: int = 32
    class_weights: ClassWeights | None = None  # None: derive from the manifest's train subset
    init: str = "auto"  # pretrained where a backbone has weights, random otherwise
    device: str = "cpu"
    eval_batch_size: int = 128
    num_workers: int = 0
    cache_images: bool = True

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("max_epochs and patience must be >= 1")
        if self.patience >= self.max_epochs:
            raise ValidationError(f"patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        if self.lr_backbone < 0 or self.lr_head < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.init not in ("auto", "pretrained", "random"):
            raise ValidationError(f"init must be auto, pretrained or random, got {self.init!r}")

    def resolved_init(self, spec: BackboneSpec) -> str:
        if self.init != "auto":
            return self.init
        return "random" if spec.pretrained_source == "none" else "pretrained"


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass(frozen=True)
class TrainedInstance:
    model_name: str
    split_index: int
    weights_ref: str
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    history: tuple[EpochLog, ...] = ()
    seed: int = 0
    weights_sha256: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [asdict(h) for h in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedInstance":
        d = dict(d)
        d["history"] = tuple(EpochLog(**h) for h in d.get("history", ()))
        return cls(**d)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EarlyStopState:
    best_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    last_epoch: int = 0


def early_stop_step(state: EarlyStopState, epoch: int, val_loss: float, patience: int) -> tuple[EarlyStopState, str]:
    """Advance the stopping rule by one epoch; returns ``(state, "continue" | "stop")``.

    Only a strictly lower loss counts as an improvement.
    """
    if epoch != state.last_epoch + 1:
        raise TrainingError(f"early stopping expected epoch {state.last_epoch + 1}, got {epoch}")
    if val_loss < state.best_loss:
        state = EarlyStopState(val_loss, epoch, 0, epoch)
    else:
        state = replace(state, epochs_since_improve=state.epochs_since_improve + 1, last_epoch=epoch)
    return state, ("stop" if state.epochs_since_improve >= patience else "continue")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class ImageSet(Dataset):
    """Preprocessed images for a list of manifest entries.

    ``cache`` is a dict shared across instances so each file is decoded once
    per backbone input format.
    """

    def __init__(self, entries: Sequence[ManifestEntry], spec: BackboneSpec, cache: dict | None = None):
        self.entries = list(entries)
        self.spec = spec
        self.cache = cache
        self._key = (spec.input_resolution, spec.normalization)

    def __len__(self):
        return len(self.entries)

    def _load(self, e: ManifestEntry) -> np.ndarray:
        if self.cache is not None:
            hit = self.cache.get((self._key, e.image_id))
            if hit is not None:
                return hit
        try:
            arr = preprocess(e.path, self.spec)
        except FileNotFoundError as err:
            raise DataError(f"image {e.image_id!r} missing at {e.path}") from err
        if self.cache is not None:
            self.cache[(self._key, e.image_id)] = arr
        return arr

    def __getitem__(self, idx):
        e = self.entries[idx]
        x = torch.from_numpy(self._load(e)).permute(2, 0, 1)
        return x, label_index(e.label)


def _check_files(entries: Sequence[ManifestEntry]) -> None:
    for e in entries:
        if not os.path.isfile(e.path):
            raise DataError(f"image {e.image_id!r} missing at {e.path}")


def _entries_for(ids: Sequence[str], by_id: dict[str, ManifestEntry]) -> list[ManifestEntry]:
    try:
        return [by_id[i] for i in ids]
    except KeyError as e:
        raise DataError(f"split plan refers to image {e.args[0]!r} absent from the manifest") from None


def plan_subsets(plan: SplitPlan, manifest: Sequence[ManifestEntry]) -> dict[str, list[ManifestEntry]]:
    by_id = {e.image_id: e for e in manifest}
    return {
        "train": _entries_for(plan.train_ids, by_id),
        "validation": _entries_for(plan.val_ids, by_id),
        "test": subset_entries(manifest, "test"),
    }


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def weighted_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """Batch mean of softmax cross-entropy, each sample scaled by its class weight."""
    per_sample = F.cross_entropy(logits, targets, reduction="none")
    return (per_sample * class_weights[targets]).mean()


def make_optimizer(model: TransferClassifier, lr_backbone: float, lr_head: float) -> torch.optim.Adam:
    groups = model.param_groups()
    return torch.optim.Adam(
        [
            {"params": groups["backbone"], "lr": lr_backbone, "name": "backbone"},
            {"params": groups["head"], "lr": lr_head, "name": "head"},
        ]
    )


def _snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@torch.no_grad()
def _mean_loss(model, loader, class_weights, device) -> float:
    model.eval()
    total, n = 0.0, 0
    for x, y in loader:
        x, y = x.to(device), y.to(device)
        loss = weighted_cross_entropy(model(x), y, class_weights)
        total += float(loss) * len(y)
        n += len(y)
    return total / max(n, 1)


@torch.no_grad()
def predict_logits(model: TransferClassifier, entries: Sequence[ManifestEntry], config: TrainConfig, cache=None) -> np.ndarray:
    """Pre-softmax outputs, shape ``(len(entries), 2)``, in entry order."""
    if not entries:
        return np.zeros((0, 2))
    model.eval()
    loader = DataLoader(ImageSet(entries, model.spec, cache), batch_size=config.eval_batch_size, shuffle=False)
    outs = [model(x.to(config.device)).double().cpu().numpy() for x, _ in loader]
    return np.concatenate(outs)


def resolve_class_weights(config: TrainConfig, manifest: Sequence[ManifestEntry]) -> ClassWeights:
    if config.class_weights is not None:
        return config.class_weights
    return compute_class_weights(DatasetCounts.from_entries(subset_entries(manifest, "train")))


def _fit(
    model_name: str,
    plan: SplitPlan,
    config: TrainConfig,
    manifest: Sequence[ManifestEntry],
    image_cache: dict | None = None,
) -> tuple[TrainedInstance, TransferClassifier]:
    spec = registry_lookup(model_name)
    subsets = plan_subsets(plan, manifest)
    _check_files(subsets["train"] + subsets["validation"])
    weights = resolve_class_weights(config, manifest)
    cache = image_cache if config.cache_images else None
    if cache is None and config.cache_images:
        cache = {}

    torch.manual_seed(plan.seed)
    model = build_classifier(spec, HeadSpec(), config.resolved_init(spec)).to(config.device)
    optimizer = make_optimizer(model, config.lr_backbone, config.lr_head)
    cw = torch.tensor(weights.as_tuple(), dtype=torch.float32, device=config.device)

    gen = torch.Generator().manual_seed(plan.seed)
    train_loader = DataLoader(
        ImageSet(subsets["train"], spec, cache),
        batch_size=config.batch_size,
        shuffle=True,
        generator=gen,
        num_workers=config.num_workers,
    )
    val_loader = DataLoader(
        ImageSet(subsets["validation"], spec, cache), batch_size=config.eval_batch_size, shuffle=False
    )

    state = EarlyStopState()
    best = None
    history = []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, n = 0.0, 0
        for x, y in train_loader:
            x, y = x.to(config.device), y.to(config.device)
            optimizer.zero_grad(set_to_none=True)
            loss = weighted_cross_entropy(model(x), y, cw)
            if not torch.isfinite(loss):
                raise TrainingError(f"{model_name} split {plan.split_index}: non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(y)
            n += len(y)
        val_loss = _mean_loss(model, val_loader, cw, config.device)
        if not math.isfinite(val_loss):
            raise TrainingError(f"{model_name} split {plan.split_index}: non-finite validation loss at epoch {epoch}")
        history.append(EpochLog(epoch, total / max(n, 1), val_loss, time.perf_counter() - t0))
        state, decision = early_stop_step(state, epoch, val_loss, config.patience)
        if state.best_epoch == epoch:
            best = _snapshot(model)
        log.info("%s split %d epoch %d: train %.5f val %.5f", model_name, plan.split_index, epoch, history[-1].train_loss, val_loss)
        if decision == "stop":
            break

    model.load_state_dict(best)
    instance = TrainedInstance(
        model_name=model_name,
        split_index=plan.split_index,
        weights_ref="",
        epochs_run=len(history),
        best_epoch=state.best_epoch,
        best_val_loss=state.best_loss,
        history=tuple(history),
        seed=plan.seed,
    )
    return instance, model


def _weights_bytes(model: torch.nn.Module) -> bytes:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getvalue()


def history_csv(instance: TrainedInstance) -> str:
    lines = ["epoch,train_loss,val_loss,wall_seconds"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.wall_seconds:.3f}" for h in instance.history]
    return "\n".join(lines) + "\n"


def _persist(store: Store, instance: TrainedInstance, model: TransferClassifier) -> TrainedInstance:
    blob = _weights_bytes(model)
    weights_path = store.artifact(instance.model_name, instance.split_index, "weights.pt")
    instance = replace(
        instance,
        weights_ref=str(weights_path.relative_to(store.root)),
        weights_sha256=sha256_bytes(blob),
    )
    store.commit(blob, weights_path)
    store.commit(history_csv(instance), store.artifact(instance.model_name, instance.split_index, "history.csv"))
    store.commit_json(instance.to_dict(), store.artifact(instance.model_name, instance.split_index, "instance.json"))
    return instance


def train_instance(
    model_name: str,
    plan: SplitPlan,
    config: TrainConfig,
    manifest: Sequence[ManifestEntry],
    store: Store | None = None,
    image_cache: dict | None = None,
) -> TrainedInstance:
    """Train one repetition and, with a store, persist weights, history and metadata."""
    instance, model = _fit(model_name, plan, config, manifest, image_cache)
    if store is not None:
        instance = _persist(store, instance, model)
    return instance


def load_model(store: Store, instance: TrainedInstance, device: str = "cpu") -> TransferClassifier:
    spec = registry_lookup(instance.model_name)
    model = build_classifier(spec, HeadSpec(), "random")
    state = torch.load(store.root / instance.weights_ref, map_location=device, weights_only=True)
    model.load_state_dict(state)
    return model.to(device).eval()


def load_instance(store: Store, model_name: str, split_index: int) -> TrainedInstance:
    return TrainedInstance.from_dict(store.read_json(store.artifact(model_name, split_index, "instance.json")))


def instance_logits(
    model: TransferClassifier,
    instance: TrainedInstance,
    plan: SplitPlan,
    manifest: Sequence[ManifestEntry],
    config: TrainConfig,
    run_id: str = "",
    image_cache: dict | None = None,
) -> list[LogitRecord]:
    """One logit record per manifest image: its plan subset, or test."""
    subsets = plan_subsets(plan, manifest)
    _check_files(subsets["test"])
    records = []
    for subset, entries in subsets.items():
        logits = predict_logits(model, entries, config, image_cache)
        for e, (neg, pos) in zip(entries, logits):
            records.append(
                LogitRecord(e.image_id, instance.model_name, instance.split_index, subset, float(neg), float(pos), e.label, run_id)
            )
    return records


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    instances: list[TrainedInstance] = field(default_factory=list)
    trained: list[tuple[str, int]] = field(default_factory=list)
    skipped: list[tuple[str, int]] = field(default_factory=list)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        return {
            "trained": len(self.trained),
            "skipped": len(self.skipped),
            "failed": [{"model": m, "split_index": i, "error": msg} for (m, i), msg in sorted(self.failures.items())],
        }


def _run_one(model_name, plan, config, manifest, store, image_cache=None) -> tuple[TrainedInstance, bool]:
    """Train (or resume) one instance and write its logits. Returns (instance, newly_trained)."""
    i = plan.split_index
    if store.is_complete(model_name, i):
        return load_instance(store, model_name, i), False
    if store.has_trained_weights(model_name, i):
        instance = load_instance(store, model_name, i)
        model = load_model(store, instance, config.device)
        trained = False
    else:
        instance, model = _fit(model_name, plan, config, manifest, image_cache)
        instance = _persist(store, instance, model)
        trained = True
    records = instance_logits(model, instance, plan, manifest, config, store.run_id, image_cache)
    store.commit(logit_csv_bytes(records), store.artifact(model_name, i, "logits.csv"))
    store.artifact(model_name, i, "failure.json").unlink(missing_ok=True)
    return instance, trained


def _job(args):
    model_name, plan, config, manifest, output_root, run_id = args
    store = Store(output_root, run_id)
    try:
        return _run_one(model_name, plan, config, manifest, store)
    except CxrBenchError as e:
        return e
    except Exception as e:  # surfaced to the parent as a recorded failure
        return TrainingError(f"{type(e).__name__}: {e}")


def _record_failure(store: Store, model_name: str, split_index: int, err: Exception, result: SuiteResult) -> None:
    msg = f"{type(err).__name__}: {err}"
    result.failures[(model_name, split_index)] = msg
    store.commit_json({"model": model_name, "split_index": split_index, "error": msg},
                      store.artifact(model_name, split_index, "failure.json"))
    log.error("%s split %d failed: %s", model_name, split_index, msg)


def train_suite(
    model_names: Sequence[str],
    plans: Sequence[SplitPlan],
    config: TrainConfig,
    manifest: Sequence[ManifestEntry],
    store: Store,
    workers: int = 1,
) -> SuiteResult:
    """Train every model on every plan; plan ``i`` is shared by all models.

    Completed instances are skipped. A failing instance is recorded in the
    store and the remaining ones still run.
    """
    if len(plans) != N_SPLITS:
        raise ValidationError(f"expected {N_SPLITS} split plans, got {len(plans)}")
    for m in model_names:
        registry_lookup(m)
    if config.class_weights is None:
        config = replace(config, class_weights=resolve_class_weights(config, manifest))

    jobs = [(m, p) for m in model_names for p in plans]
    result = SuiteResult()

    def collect(m, p, out):
        if isinstance(out, Exception):
            _record_failure(store, m, p.split_index, out, result)
            return
        instance, trained = out
        result.instances.append(instance)
        (result.trained if trained else result.skipped).append((m, p.split_index))

    if workers <= 1:
        image_cache: dict = {}
        for m, p in jobs:
            try:
                out = _run_one(m, p, config, manifest, store, image_cache)
            except CxrBenchError as e:
                out = e
            except Exception as e:
                out = TrainingError(f"{type(e).__name__}: {e}")
            collect(m, p, out)
    else:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = [
                pool.submit(_job, (m, p, config, list(manifest), store.root.parent, store.run_id)) for m, p in jobs
            ]
            for (m, p), fut in zip(jobs, futures):
                collect(m, p, fut.result())

    result.instances.sort(key=lambda t: (t.model_name, t.split_index))
    return result


__all__ = [
    "TrainConfig",
    "TrainedInstance",
    "EarlyStopState",
    "early_stop_step",
    "train_instance",
    "train_suite",
    "weighted_cross_entropy",
    "make_optimizer",
]
