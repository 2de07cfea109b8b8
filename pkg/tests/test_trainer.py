import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrbench import trainer
from cxrbench.dataset import ClassWeights, build_splits
from cxrbench.ensemble import read_logit_csv
from cxrbench.errors import DataError, TrainingError, ValidationError
from cxrbench.model_zoo import STUB, build_classifier
from cxrbench.store import Store
from cxrbench.synthetic import generate_synthetic
from cxrbench.trainer import (
    EarlyStopState,
    TrainConfig,
    early_stop_step,
    load_model,
    make_optimizer,
    plan_subsets,
    predict_logits,
    train_instance,
    train_suite,
    weighted_cross_entropy,
)

FAST = TrainConfig(max_epochs=3, patience=2, batch_size=8)


def run_stopper(losses, patience):
    state = EarlyStopState()
    for epoch, loss in enumerate(losses, start=1):
        state, decision = early_stop_step(state, epoch, loss, patience)
        if decision == "stop":
            return state.best_epoch, epoch
    return state.best_epoch, None


def scan_oracle(losses, patience):
    """First epoch where the last ``patience`` epochs all failed to beat the running best."""
    best, best_epoch, since = math.inf, 0, 0
    for epoch, loss in enumerate(losses, start=1):
        if loss < best:
            best, best_epoch, since = loss, epoch, 0
        else:
            since += 1
        if since == patience:
            return best_epoch, epoch
    return best_epoch, None


def test_early_stop_scripted():
    assert run_stopper([3, 2, 4, 5], 2) == (2, 4)


def test_early_stop_never_on_decreasing():
    assert run_stopper([50 - i for i in range(50)], 10) == (50, None)


def test_early_stop_ties_do_not_improve():
    assert run_stopper([1.0, 1.0, 1.0], 2) == (1, 3)


def test_early_stop_random_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        losses = rng.random(100).tolist()
        assert run_stopper(losses, 7) == scan_oracle(losses, 7)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 6).map(float), min_size=1, max_size=40), st.integers(1, 10))
def test_early_stop_matches_oracle(losses, patience):
    assert run_stopper(losses, patience) == scan_oracle(losses, patience)


def test_early_stop_counter_bounded():
    state = EarlyStopState()
    for epoch, loss in enumerate([5, 4, 6, 7, 8, 3, 9], start=1):
        state, decision = early_stop_step(state, epoch, loss, 3)
        assert state.epochs_since_improve <= 3
        if decision == "stop":
            break


def test_early_stop_rejects_skipped_epoch():
    state, _ = early_stop_step(EarlyStopState(), 1, 1.0, 2)
    with pytest.raises(TrainingError):
        early_stop_step(state, 3, 1.0, 2)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(max_epochs=10, patience=10)
    with pytest.raises(ValidationError):
        TrainConfig(lr_head=-1.0)
    assert TrainConfig().resolved_init(STUB) == "random"


# --- loss and optimiser --------------------------------------------------------


def test_weighted_loss_unit_weights():
    torch.manual_seed(0)
    logits = torch.randn(16, 2)
    y = torch.randint(0, 2, (16,))
    got = weighted_cross_entropy(logits, y, torch.tensor([1.0, 1.0]))
    assert abs(got.item() - F.cross_entropy(logits, y).item()) < 1e-6


def test_weighted_loss_doubling():
    torch.manual_seed(1)
    logits = torch.randn(10, 2)
    y = torch.tensor([0, 1] * 5)
    per = F.cross_entropy(logits, y, reduction="none")
    base = weighted_cross_entropy(logits, y, torch.tensor([1.0, 1.0])).item()
    doubled = weighted_cross_entropy(logits, y, torch.tensor([1.0, 2.0])).item()
    pos_part = per[y == 1].sum().item() / len(y)
    assert abs(doubled - base - pos_part) < 1e-6


@pytest.mark.parametrize("frozen", ["head", "backbone"])
def test_two_tier_rates(frozen):
    torch.manual_seed(0)
    model = build_classifier(STUB, init="random")
    lr = {"backbone": 1e-2, "head": 1e-2, frozen: 0.0}
    opt = make_optimizer(model, lr["backbone"], lr["head"])
    assert [g["lr"] for g in opt.param_groups] == [lr["backbone"], lr["head"]]
    before = {k: [p.detach().clone() for p in v] for k, v in model.param_groups().items()}
    x, y = torch.rand(8, 3, 32, 32), torch.tensor([0, 1] * 4)
    weighted_cross_entropy(model(x), y, torch.tensor([1.0, 1.0])).backward()
    opt.step()
    after = model.param_groups()
    moving = "head" if frozen == "backbone" else "backbone"
    assert all(torch.equal(a, b) for a, b in zip(before[frozen], after[frozen]))
    assert any(not torch.equal(a, b) for a, b in zip(before[moving], after[moving]))


# --- training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def plans(tiny_data):
    _, entries = tiny_data
    return build_splits(entries, 0.25, [11, 12, 13, 14, 15])


def test_difficulty_zero_reaches_full_validation_accuracy(tmp_path):
    # the stub starts from random weights, so its trunk gets the head's rate
    entries = generate_synthetic(tmp_path, 64, 32, seed=0, difficulty=0.0)
    plan = build_splits(entries, 0.2, [1, 2, 3, 4, 5])[0]
    config = TrainConfig(max_epochs=20, patience=10, lr_backbone=1e-3, batch_size=8)
    instance, model = trainer._fit("stub", plan, config, entries)
    assert instance.epochs_run <= 20
    val = plan_subsets(plan, entries)["validation"]
    pred = predict_logits(model, val, config).argmax(axis=1)
    truth = np.array([e.label == "positive" for e in val])
    assert (pred == truth).mean() == 1.0


def test_restoration_and_reload(tiny_data, plans, tmp_path):
    _, entries = tiny_data
    config = TrainConfig(max_epochs=6, patience=2, batch_size=8)
    store = Store(tmp_path, "r")
    inst, model = trainer._fit("stub", plans[1], config, entries)
    saved = trainer._persist(store, inst, model)
    # the restored weights reproduce the best epoch's validation loss exactly
    subsets = plan_subsets(plans[1], entries)
    loader = torch.utils.data.DataLoader(trainer.ImageSet(subsets["validation"], STUB), batch_size=config.eval_batch_size)
    cw = torch.tensor(trainer.resolve_class_weights(config, entries).as_tuple())
    assert trainer._mean_loss(model, loader, cw, "cpu") == inst.best_val_loss
    # and the stored snapshot gives bit-identical outputs
    reloaded = load_model(store, saved)
    probe = subsets["test"]
    assert np.array_equal(predict_logits(model, probe, config), predict_logits(reloaded, probe, config))
    assert inst.best_val_loss == min(h.val_loss for h in inst.history)
    assert inst.best_epoch == 1 + [h.val_loss for h in inst.history].index(inst.best_val_loss)
    assert inst.epochs_run <= min(config.max_epochs, inst.best_epoch + config.patience)


def test_flat_losses_run_to_max_epochs(tiny_data, plans, monkeypatch):
    _, entries = tiny_data
    monkeypatch.setattr(trainer, "_mean_loss", lambda *a, **k: 0.5)
    config = TrainConfig(max_epochs=4, patience=3, lr_backbone=0.0, lr_head=0.0, batch_size=8)
    inst = train_instance("stub", plans[0], config, entries)
    assert inst.epochs_run == 4 and inst.best_epoch == 1


def test_divergence_raises(tiny_data, plans, monkeypatch):
    _, entries = tiny_data
    monkeypatch.setattr(trainer, "weighted_cross_entropy", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingError, match="non-finite"):
        train_instance("stub", plans[0], FAST, entries)


def test_missing_image_names_id(tiny_data, plans, tmp_path):
    _, entries = tiny_data
    broken = [e if e.image_id != plans[0].train_ids[0] else type(e)(e.image_id, str(tmp_path / "gone.png"), e.label, e.patient_id, e.source, e.subset) for e in entries]
    with pytest.raises(DataError, match=plans[0].train_ids[0]):
        train_instance("stub", plans[0], FAST, broken)


# --- suite ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def suite_store(tiny_data, plans, tmp_path_factory):
    _, entries = tiny_data
    store = Store(tmp_path_factory.mktemp("suite"), "suite")
    result = train_suite(["stub", "stub@16"], plans, FAST, entries, store)
    return store, result


def test_suite_bookkeeping(suite_store, tiny_data):
    store, result = suite_store
    _, entries = tiny_data
    assert result.complete and len(result.trained) == 10 and not result.skipped
    pairs = {(i.model_name, i.split_index) for i in result.instances}
    assert pairs == {(m, s) for m in ("stub", "stub@16") for s in range(1, 6)}
    records = [r for m, s in pairs for r in read_logit_csv(store.artifact(m, s, "logits.csv"))]
    assert len(records) == 10 * len(entries)
    assert len({(r.model, r.split_index, r.subset, r.image_id) for r in records}) == len(records)
    for m, s in pairs:
        subsets = {r.subset for r in read_logit_csv(store.artifact(m, s, "logits.csv"))}
        assert subsets == {"train", "validation", "test"}
        history = store.artifact(m, s, "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_loss,wall_seconds"


def test_suite_instance_i_uses_plan_i(suite_store, plans):
    store, _ = suite_store
    for s, plan in enumerate(plans, start=1):
        val = {r.image_id for r in read_logit_csv(store.artifact("stub@16", s, "logits.csv")) if r.subset == "validation"}
        assert val == set(plan.val_ids)


def test_suite_resume(suite_store, tiny_data, plans):
    store, _ = suite_store
    _, entries = tiny_data
    again = train_suite(["stub", "stub@16"], plans, FAST, entries, store)
    assert again.trained == [] and len(again.skipped) == 10

    logits = store.artifact("stub", 2, "logits.csv")
    before = logits.read_bytes()
    logits.unlink()
    third = train_suite(["stub"], plans, FAST, entries, store)
    assert third.trained == [] and logits.read_bytes() == before


def test_suite_records_failures(tiny_data, plans, tmp_path, monkeypatch):
    _, entries = tiny_data
    real_fit = trainer._fit

    def flaky(model_name, plan, *a, **k):
        if plan.split_index == 3:
            raise TrainingError("boom")
        return real_fit(model_name, plan, *a, **k)

    monkeypatch.setattr(trainer, "_fit", flaky)
    store = Store(tmp_path, "f")
    result = train_suite(["stub"], plans, FAST, entries, store)
    assert not result.complete
    assert list(result.failures) == [("stub", 3)]
    assert len(result.trained) == 4
    assert store.artifact("stub", 3, "failure.json").exists()
    assert result.summary()["failed"][0]["split_index"] == 3


def test_suite_needs_five_plans(tiny_data, plans, tmp_path):
    _, entries = tiny_data
    with pytest.raises(ValidationError):
        train_suite(["stub"], plans[:4], FAST, entries, Store(tmp_path, "x"))


def test_explicit_class_weights_are_used(tiny_data, plans):
    _, entries = tiny_data
    cfg = TrainConfig(max_epochs=2, patience=1, batch_size=8, class_weights=ClassWeights(1.0, 1.0))
    assert trainer.resolve_class_weights(cfg, entries) == ClassWeights(1.0, 1.0)
