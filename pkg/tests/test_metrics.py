import numpy as np
import pytest

from ldfnet.errors import DataError
from ldfnet.metrics import ConfusionMatrix, metrics_records, metrics_table, miou

from oracles import miou_oracle


def test_empty_update_is_identity():
    cm = ConfusionMatrix(3)
    before = cm.counts.copy()
    cm.accumulate(np.zeros((0,), dtype=int), np.zeros((0,), dtype=int))
    np.testing.assert_array_equal(cm.counts, before)


def test_accumulation_is_order_independent():
    rng = np.random.default_rng(0)
    pred_a = rng.integers(0, 4, size=(8, 8))
    gt_a = rng.integers(0, 4, size=(8, 8))
    pred_b = rng.integers(0, 4, size=(8, 8))
    gt_b = rng.integers(0, 4, size=(8, 8))
    ab = ConfusionMatrix(4).accumulate(pred_a, gt_a).accumulate(pred_b, gt_b)
    ba = ConfusionMatrix(4).accumulate(pred_b, gt_b).accumulate(pred_a, gt_a)
    np.testing.assert_array_equal(ab.counts, ba.counts)


def test_counts_preserve_pixel_totals():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 3, size=(10, 10))
    gt = rng.integers(0, 3, size=(10, 10))
    gt[0, :5] = 255
    cm = ConfusionMatrix(3).accumulate(pred, gt)
    assert cm.total() == 100 - 5


def test_matches_counting_oracle():
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 5, size=(16, 16))
    gt = rng.integers(0, 5, size=(16, 16))
    gt[rng.random((16, 16)) < 0.1] = 255
    cm = ConfusionMatrix(5).accumulate(pred, gt)
    ours_per, ours_mean = cm.iou()
    ref_per, ref_mean = miou_oracle(pred, gt, 5)
    for a, b in zip(ours_per, ref_per):
        if b is None:
            assert a is None
        else:
            assert a == pytest.approx(b, abs=1e-12)
    assert ours_mean == pytest.approx(ref_mean, abs=1e-12)


def test_perfect_prediction_is_one():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 4, size=(12, 12))
    cm = ConfusionMatrix(4).accumulate(gt, gt)
    mean, per_class = miou(cm)
    assert mean == 1.0
    assert cm.pixel_accuracy() == 1.0


def test_hand_counted_binary_case():
    # Half the truth is class 0, half class 1, prediction says all-0:
    # IoU_0 = 0.5, IoU_1 = 0, mean 0.25.
    gt = np.array([0] * 8 + [1] * 8)
    pred = np.zeros(16, dtype=int)
    mean, per_class = miou(ConfusionMatrix(2).accumulate(pred, gt))
    assert per_class == [pytest.approx(0.5), pytest.approx(0.0)]
    assert mean == pytest.approx(0.25)


def test_absent_class_excluded_by_default():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 1, 0])
    cm = ConfusionMatrix(3).accumulate(pred, gt)
    per_class, mean = cm.iou()
    assert per_class[2] is None
    assert mean == pytest.approx((2 / 3 + 1 / 2) / 2)
    per_zero, mean_zero = cm.iou(absent_as_zero=True)
    assert per_zero[2] == 0.0
    assert mean_zero == pytest.approx((2 / 3 + 1 / 2 + 0.0) / 3)


def test_label_permutation_preserves_mean():
    rng = np.random.default_rng(4)
    pred = rng.integers(0, 4, size=(20, 20))
    gt = rng.integers(0, 4, size=(20, 20))
    perm = np.array([2, 3, 1, 0])
    base = ConfusionMatrix(4).accumulate(pred, gt)
    permuted = ConfusionMatrix(4).accumulate(perm[pred], perm[gt])
    base_per, base_mean = base.iou()
    perm_per, perm_mean = permuted.iou()
    assert perm_mean == pytest.approx(base_mean, abs=1e-12)
    for k in range(4):
        assert perm_per[perm[k]] == pytest.approx(base_per[k], abs=1e-12)


def test_iou_bounds():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = rng.integers(0, 3, size=(9, 9))
        gt = rng.integers(0, 3, size=(9, 9))
        per_class, mean = ConfusionMatrix(3).accumulate(pred, gt).iou()
        assert 0.0 <= mean <= 1.0
        for v in per_class:
            assert v is None or 0.0 <= v <= 1.0


def test_merge_equals_joint_accumulation():
    rng = np.random.default_rng(6)
    pred = rng.integers(0, 3, size=(10, 10))
    gt = rng.integers(0, 3, size=(10, 10))
    joint = ConfusionMatrix(3).accumulate(pred, gt).accumulate(pred.T, gt.T)
    a = ConfusionMatrix(3).accumulate(pred, gt)
    b = ConfusionMatrix(3).accumulate(pred.T, gt.T)
    np.testing.assert_array_equal(a.merge(b).counts, joint.counts)


def test_out_of_range_prediction_rejected():
    cm = ConfusionMatrix(3)
    with pytest.raises(DataError):
        cm.accumulate(np.array([5]), np.array([1]))


def test_empty_matrix_rejected():
    with pytest.raises(DataError):
        ConfusionMatrix(3).iou()


def test_report_forms():
    gt = np.array([0, 1, 1, 0])
    cm = ConfusionMatrix(2).accumulate(gt, gt)
    records = metrics_records(cm)
    assert records["miou"] == "1.000000"
    assert records["pixel_accuracy"] == "1.000000"
    table = metrics_table(cm)
    assert "mean_iou" in table and "1.0000" in table
