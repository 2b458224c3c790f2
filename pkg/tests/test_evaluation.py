import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dollkit.errors import SchemaMismatchError
from dollkit.evaluation import (MetricsReport, acc, compare_runs, dice, doll_localization, evaluate_masks, iou,
                                iterations_to_fraction, positive_fraction, random_placement)

masks = arrays(np.uint8, (5, 5), elements=st.integers(0, 1))


def test_iou_worked_example():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[:2, :2] = 1       # 4 pixels
    b[:2, 1:3] = 1      # 4 pixels, overlap 2
    assert iou(a, b) == pytest.approx(2 / 6)
    assert dice(a, b) == pytest.approx(4 / 8)
    assert acc(a, b) == pytest.approx(12 / 16)


def test_empty_convention():
    z = np.zeros((3, 3))
    assert iou(z, z) == 1.0 and dice(z, z) == 1.0
    o = np.ones((3, 3))
    assert iou(o, z) == 0.0


@given(masks, masks)
def test_dice_iou_identity_and_symmetry(a, b):
    i = iou(a, b)
    assert dice(a, b) == pytest.approx(2 * i / (1 + i))
    assert iou(a, b) == iou(b, a)
    assert 0 <= i <= 1


@given(masks, masks, masks)
def test_iou_monotone_in_true_positives(pred, gt, extra):
    # adding correctly predicted pixels never lowers IoU
    better = pred | (gt & extra)
    assert iou(better, gt) >= iou(pred, gt) - 1e-12


def test_aggregates_are_means_of_per_class():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 2, (6, 3, 8, 8))
    gt = rng.integers(0, 2, (6, 3, 8, 8))
    rep = evaluate_masks(pred, gt)
    for k in ("iou", "acc", "dice"):
        assert rep.aggregates[f"m{k}"] == pytest.approx(np.mean([v[k] for v in rep.per_class.values()]))
    # counts are pooled over the split, not averaged per image
    c0 = iou(pred[:, 0], gt[:, 0])
    assert rep.per_class["class0"]["iou"] == pytest.approx(c0)
    assert rep.meta["background_class"] == "excluded"


def test_evaluate_rejects_bad_input():
    with pytest.raises(ValueError):
        evaluate_masks(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)))
    with pytest.raises(ValueError):
        evaluate_masks(np.zeros((1, 1, 4, 4)), np.zeros((1, 2, 4, 4)))


def test_report_round_trip():
    rep = evaluate_masks(np.ones((1, 2, 3, 3)), np.ones((1, 2, 3, 3)), ["a", "b"])
    assert MetricsReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()


def test_compare_runs_is_deterministic():
    rng = np.random.default_rng(1)
    reports = {k: evaluate_masks(rng.integers(0, 2, (2, 2, 4, 4)), rng.integers(0, 2, (2, 2, 4, 4)))
               for k in ("b", "a")}
    hist = {"a": [{"iteration": 0, "split": "val", "metric": "miou", "value": 0.1}]}
    c1, c2 = compare_runs(reports, hist), compare_runs(dict(reversed(list(reports.items()))), hist)
    assert c1.table() == c2.table() and c1.csv() == c2.csv()
    assert [r[0] for r in c1.rows] == ["a", "b"]
    assert c1.csv().splitlines()[0] == "run,class0.iou,class1.iou,miou,macc,mdice"
    assert c1.curves_csv().splitlines()[1] == "a,0,0.1"


def test_compare_runs_schema_mismatch():
    a = evaluate_masks(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)))
    b = evaluate_masks(np.ones((1, 2, 2, 2)), np.ones((1, 2, 2, 2)))
    with pytest.raises(SchemaMismatchError):
        compare_runs({"a": a, "b": b})


def test_random_placement_preserves_area():
    rng = np.random.default_rng(0)
    plane = np.zeros((16, 16), np.uint8)
    plane[2:5, 3:9] = 1
    for _ in range(10):
        assert random_placement(plane, rng).sum() == plane.sum()


def test_localization_perfect_doll_beats_random():
    gt = np.zeros((20, 1, 32, 32), np.uint8)
    for i in range(20):
        gt[i, 0, i:i + 5, 3:8] = 1
    res = doll_localization(gt, gt, np.ones((20, 1)), seed=0)
    assert res["doll_iou"] == 1.0
    assert res["random_iou"] < 0.2
    assert res["n"] == 20


def test_localization_skips_negatives_and_empty_planes():
    gt = np.zeros((2, 1, 8, 8), np.uint8)
    gt[0, 0, :2, :2] = 1
    dolls = np.zeros_like(gt)
    dolls[1, 0, 0, 0] = 1
    res = doll_localization(dolls, gt, np.array([[1], [0]]))
    assert res["n"] == 0 and np.isnan(res["doll_iou"])


def test_positive_fraction():
    p = np.zeros((2, 3, 4, 5))
    p[0, 1, :2] = 1
    assert positive_fraction(p)[0, 1] == pytest.approx(0.5)


def test_iterations_to_fraction():
    h = [{"iteration": i * 10, "metric": "miou", "value": v} for i, v in enumerate([0, .5, .85, .95, 1.0])]
    assert iterations_to_fraction(h, 0.9) == 30
    assert iterations_to_fraction(h, 0.5) == 10


def test_left_half_prediction():
    gt = np.ones((4, 6))
    pred = np.zeros((4, 6))
    pred[:, :3] = 1
    assert iou(pred, gt) == pytest.approx(0.5)
    assert dice(pred, gt) == pytest.approx(2 / 3)


def test_perfect_and_constant_zero_predictors():
    rng = np.random.default_rng(4)
    gt = rng.integers(0, 2, (3, 2, 6, 6))
    perfect = evaluate_masks(gt, gt)
    assert perfect.aggregates == {"miou": 1.0, "macc": 1.0, "mdice": 1.0}
    zero = evaluate_masks(np.zeros_like(gt), gt)
    assert all(v["iou"] == 0.0 for v in zero.per_class.values())
