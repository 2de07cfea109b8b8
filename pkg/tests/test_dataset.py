import hashlib
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cxrbench.dataset import (
    ClassWeights,
    DatasetCounts,
    ManifestEntry,
    SplitPlan,
    build_splits,
    check_patient_disjoint,
    compute_class_weights,
    load_manifest,
    patient_overlap,
    stratified_val_count,
    write_manifest,
)
from cxrbench.errors import ManifestParseError, StoreError, ValidationError
from cxrbench.synthetic import generate_synthetic

HEADER = "image_id\tpath\tlabel\tpatient_id\tsource\tsubset\n"


def _entries(n_neg, n_pos, subset="train", prefix="x"):
    out = []
    for lab, n in (("negative", n_neg), ("positive", n_pos)):
        for j in range(n):
            iid = f"{prefix}{lab[0]}{j:05d}"
            out.append(ManifestEntry(iid, f"{iid}.png", lab, f"p{iid}", "synthetic", subset))
    return out


# --- manifests ---------------------------------------------------------------


def test_tsv_four_lines(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text(
        HEADER
        + "a\ta.png\tnegative\tp1\tsrc\ttrain\n"
        + "b\tb.png\tnegative\t\tsrc\ttrain\n"
        + "c\tc.png\tpositive\tp3\tsrc\ttest\n"
        + "d\t/abs/d.png\tpositive\tp4\tsrc\ttrain\n"
    )
    es = load_manifest(p)
    assert [e.label for e in es] == ["negative", "negative", "positive", "positive"]
    assert es[1].patient_id is None
    assert es[0].path == str(tmp_path / "a.png")
    assert es[3].path == "/abs/d.png"


def test_covidx_line(tmp_path):
    p = tmp_path / "train_split.txt"
    p.write_text("p001 img1.png positive source_a\np002 img2.png Normal source_b\np003 img3.png COVID-19 src\n")
    es = load_manifest(p, "covidx_txt")
    assert es[0].patient_id == "p001" and es[0].label == "positive" and es[0].image_id == "img1"
    assert es[1].label == "negative"
    assert es[2].label == "positive"
    assert {e.subset for e in es} == {"train"}
    t = tmp_path / "test_split.txt"
    t.write_text("p9 z.png negative s\n")
    assert load_manifest(t, "covidx_txt")[0].subset == "test"


def test_duplicate_id(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text(HEADER + "img1\ta.png\tnegative\t\ts\ttrain\nimg1\tb.png\tpositive\t\ts\ttrain\n")
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text(HEADER + "a\ta.png\tnegative\t\ts\ttrain\nb\tb.png\tnegative\n")
    with pytest.raises(ManifestParseError) as ei:
        load_manifest(p)
    assert ei.value.line_no == 3


@pytest.mark.parametrize("token", ["pneumonia-ish", "abnormal", "2"])
def test_unknown_label_token(tmp_path, token):
    p = tmp_path / "l.txt"
    p.write_text(f"p1 a.png {token} s\n")
    with pytest.raises(ValidationError, match="label"):
        load_manifest(p, "covidx_txt", subset="train")


def test_manifest_roundtrip(tmp_path):
    es = _entries(3, 2) + _entries(1, 1, "test", prefix="t")
    es = [ManifestEntry(e.image_id, str(tmp_path / e.path), e.label, e.patient_id, e.source, e.subset) for e in es]
    write_manifest(es, tmp_path / "m.tsv", relative_to=tmp_path)
    assert load_manifest(tmp_path / "m.tsv") == es


def test_patient_overlap_flagged():
    es = [
        ManifestEntry("a", "a", "negative", "p1", "s", "train"),
        ManifestEntry("b", "b", "positive", "p1", "s", "test"),
        ManifestEntry("c", "c", "positive", "p2", "s", "test"),
    ]
    assert patient_overlap(es) == {"p1"}
    with pytest.raises(ValidationError):
        check_patient_disjoint(es)
    check_patient_disjoint(es[1:])


# --- class weights -----------------------------------------------------------


@pytest.mark.parametrize(
    "neg,pos,expected",
    [(13794, 2158, (0.5782, 3.6960)), (100, 100, (1.0, 1.0)), (3, 1, (0.6667, 2.0))],
)
def test_class_weight_examples(neg, pos, expected):
    w = compute_class_weights(DatasetCounts(neg, pos))
    assert round(w.w_negative, 4) == expected[0]
    assert round(w.w_positive, 4) == expected[1]


def test_class_weight_zero_count():
    with pytest.raises(ValidationError):
        compute_class_weights(DatasetCounts(5, 0))


@given(st.integers(1, 10**7), st.integers(1, 10**7))
def test_class_weight_balance(neg, pos):
    w = compute_class_weights(DatasetCounts(neg, pos))
    assert math.isclose(w.w_negative * neg + w.w_positive * pos, neg + pos, rel_tol=1e-9)
    # exact rational oracle
    t = Fraction(neg + pos)
    assert math.isclose(w.w_negative, float(t / 2 / neg), rel_tol=1e-15)


# --- splits ------------------------------------------------------------------


def test_split_counts_80_20():
    plans = build_splits(_entries(80, 20), 0.2, [1, 2, 3, 4, 5])
    for p in plans:
        labs = [i[1] for i in p.val_ids]  # ids encode the label letter
        assert labs.count("n") == 16 and labs.count("p") == 4


def test_split_counts_covidx_scale():
    assert stratified_val_count(13794, 0.2) == 2759
    assert stratified_val_count(2158, 0.2) == 432
    plan = build_splits(_entries(13794, 2158), 0.2, [1, 2, 3, 4, 5])[0]
    assert len(plan.val_ids) == 3191
    assert sum(1 for i in plan.val_ids if i[1] == "p") == 432


def test_round_half_up():
    assert stratified_val_count(5, 0.5) == 3  # 2.5 rounds up
    assert stratified_val_count(15, 0.1) == 2  # 1.5
    assert stratified_val_count(25, 0.1) == 3  # 2.5, not banker's 2


def test_split_determinism_and_roundtrip():
    es = _entries(30, 12)
    a = build_splits(es, 0.2, [7, 8, 9, 10, 11])
    b = build_splits(list(reversed(es)), 0.2, [7, 8, 9, 10, 11])
    assert a == b
    assert [SplitPlan.from_dict(p.to_dict()) for p in a] == a
    assert len({p.val_ids for p in a}) > 1


def test_split_ignores_test_subset():
    es = _entries(10, 10) + _entries(5, 5, "test", prefix="t")
    for p in build_splits(es, 0.2):
        assert not any(i.startswith("t") for i in p.train_ids + p.val_ids)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_split_bad_fraction(bad):
    with pytest.raises(ValidationError):
        build_splits(_entries(10, 10), bad)


def test_split_seed_rules():
    with pytest.raises(ValidationError):
        build_splits(_entries(10, 10), 0.2, [1, 2, 3, 4])
    with pytest.raises(ValidationError):
        build_splits(_entries(10, 10), 0.2, [1, 1, 2, 3, 4])
    with pytest.raises(ValidationError):
        build_splits(_entries(10, 1), 0.2)


def test_split_warns_on_empty_validation_class():
    with pytest.warns(UserWarning, match="no validation"):
        build_splits(_entries(40, 2), 0.2)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(2, 300),
    st.integers(2, 300),
    st.floats(0.05, 0.95),
    st.lists(st.integers(0, 2**31), min_size=5, max_size=5, unique=True),
)
def test_split_properties(n_neg, n_pos, frac, seeds):
    es = _entries(n_neg, n_pos)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plans = build_splits(es, frac, seeds)
        again = build_splits(es, frac, seeds)
    assert plans == again
    all_ids = {e.image_id for e in es}
    for p in plans:
        tr, va = set(p.train_ids), set(p.val_ids)
        assert not tr & va
        assert tr | va == all_ids
        for letter, c in (("n", n_neg), ("p", n_pos)):
            k = sum(1 for i in va if i[1] == letter)
            assert abs(k - c * frac) < 1


# --- synthetic data ----------------------------------------------------------


def _digest(folder):
    h = hashlib.sha256()
    for f in sorted(folder.rglob("*")):
        if f.is_file():
            h.update(f.relative_to(folder).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_synthetic_layout(tmp_path):
    es = generate_synthetic(tmp_path, 4, 64, seed=1, difficulty=0.0)
    assert len(es) == 8
    assert len({e.patient_id for e in es}) == 8
    assert {e.subset for e in es} == {"train", "test"}
    loaded = load_manifest(tmp_path / "manifest.tsv")
    assert loaded == es
    im = Image.open(es[0].path)
    assert im.mode == "L" and im.size == (64, 64)


def test_synthetic_deterministic(tmp_path):
    generate_synthetic(tmp_path / "a", 4, 64, seed=1, difficulty=0.0)
    generate_synthetic(tmp_path / "b", 4, 64, seed=1, difficulty=0.0)
    generate_synthetic(tmp_path / "c", 4, 64, seed=2, difficulty=0.0)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def _threshold_acc(entries):
    """Best single-threshold accuracy on mean pixel intensity."""
    means = np.array([np.asarray(Image.open(e.path), dtype=np.float64).mean() for e in entries])
    y = np.array([e.label == "positive" for e in entries])
    best = 0.0
    for t in np.concatenate([means, [means.max() + 1]]):
        pred = means >= t
        best = max(best, (pred == y).mean(), (~pred == y).mean())
    return best


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_synthetic_difficulty_zero_separable_by_mean(tmp_path, seed):
    es = generate_synthetic(tmp_path, 4, 64, seed=seed, difficulty=0.0)
    assert _threshold_acc(es) == 1.0


def test_synthetic_difficulty_one_not_separable(tmp_path):
    es = generate_synthetic(tmp_path, 100, 32, seed=0, difficulty=1.0)
    assert _threshold_acc(es) < 0.75


def test_synthetic_preconditions(tmp_path):
    with pytest.raises(ValidationError):
        generate_synthetic(tmp_path, 1, 64)
    with pytest.raises(ValidationError):
        generate_synthetic(tmp_path, 4, 64, difficulty=1.5)


def test_synthetic_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StoreError):
        generate_synthetic(blocker / "sub", 4, 16)


def test_class_weights_container():
    w = ClassWeights(0.5, 2.0)
    assert w.for_label("positive") == 2.0 and w.as_tuple() == (0.5, 2.0)
