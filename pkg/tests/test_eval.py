import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asdt import IGNORE
from asdt import eval as ev


def count_oracle(pred, gt, n):
    cm = np.zeros((n, n), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != IGNORE:
            cm[g, p] += 1
    return cm


def test_perfect_prediction_is_diagonal(rng):
    gt = rng.integers(0, 4, (8, 8))
    cm = ev.accumulate(ev.new_confusion(4), gt, gt)
    assert (cm == np.diag(np.diag(cm))).all()
    assert ev.miou(cm)[0] == 1.0


def test_ignore_only_leaves_matrix_unchanged():
    cm = ev.new_confusion(3)
    out = ev.accumulate(cm, np.zeros((4, 4), int), np.full((4, 4), IGNORE))
    assert (out == cm).all()


def test_random_4x4_matches_counting(rng):
    for _ in range(50):
        gt = rng.integers(0, 3, (4, 4))
        gt[rng.random((4, 4)) < 0.2] = IGNORE
        pred = rng.integers(0, 3, (4, 4))
        cm = ev.accumulate(ev.new_confusion(3), pred, gt)
        assert (cm == count_oracle(pred, gt, 3)).all()
        assert cm.sum() == (gt != IGNORE).sum()


def test_two_by_two_worked_example():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    m, iou = ev.miou(ev.accumulate(ev.new_confusion(2), pred, gt))
    assert iou[0] == pytest.approx(1 / 2)
    assert iou[1] == pytest.approx(2 / 3)
    assert m == pytest.approx(7 / 12)


def test_disjoint_class_has_zero_iou():
    gt = np.array([[0, 2], [2, 0]])
    pred = np.array([[2, 0], [0, 2]])
    _, iou = ev.miou(ev.accumulate(ev.new_confusion(3), pred, gt))
    assert iou[2] == 0 and iou[0] == 0
    assert np.isnan(iou[1])  # zero union: excluded


def test_zero_union_excluded_from_mean():
    gt = np.array([[0, 0], [1, 1]])
    _, iou = ev.miou(ev.accumulate(ev.new_confusion(5), gt, gt))
    assert ev.miou(ev.accumulate(ev.new_confusion(5), gt, gt))[0] == 1.0
    assert np.isnan(iou[2:]).all()


def test_out_of_range_label_names_pixel():
    gt = np.zeros((3, 3), int)
    pred = np.zeros((3, 3), int)
    pred[1, 2] = 7
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        ev.accumulate(ev.new_confusion(3), pred, gt)


def test_shape_mismatch_and_empty():
    with pytest.raises(ValueError):
        ev.accumulate(ev.new_confusion(2), np.zeros((2, 2), int), np.zeros((3, 3), int))
    with pytest.raises(ValueError):
        ev.miou(ev.new_confusion(2))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_order_independent_and_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    batches = [(r.integers(0, 4, (5, 5)), r.integers(0, 4, (5, 5))) for _ in range(4)]
    a = ev.new_confusion(4)
    for p, g in batches:
        a = ev.accumulate(a, p, g)
    b = ev.new_confusion(4)
    for p, g in reversed(batches):
        b = ev.accumulate(b, p, g)
    assert (a == b).all()

    perm = r.permutation(4)
    c = ev.new_confusion(4)
    for p, g in batches:
        c = ev.accumulate(c, perm[p], perm[g])
    assert ev.miou(c)[0] == pytest.approx(ev.miou(a)[0])
    _, iou = ev.miou(a)
    assert np.all((iou[~np.isnan(iou)] >= 0) & (iou[~np.isnan(iou)] <= 1))


def test_metrics_file_roundtrip(tmp_path):
    cm = ev.accumulate(ev.new_confusion(3), np.array([[0, 1], [2, 2]]), np.array([[0, 1], [2, 1]]))
    m = ev.per_class_metrics("s", cm, ["circle", "rectangle"])
    path = ev.write_metrics(tmp_path / "metrics.tsv", m)
    back = ev.read_metrics(path)
    assert back.keys() == m.keys()
    assert back["s.miou"] == pytest.approx(m["s.miou"], abs=1e-4)
    assert (tmp_path / "metrics.json").exists()


def test_format_table():
    text = ev.format_table(["tau", "miou"], [(2, 50.0), (4, 61.25)])
    lines = text.splitlines()
    assert len(lines) == 4 and lines[0].split() == ["tau", "miou"]
