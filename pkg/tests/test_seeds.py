"""Seed extraction, discretization, and metrics against brute-force oracles."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedlab.seeds import (
    SeedArea,
    SeedLabelMap,
    add_counts,
    compute_seed_area,
    confusion_counts,
    evaluate_seed_metrics,
    metrics_from_counts,
    raw_seed_map,
    seed_label_map,
)


def brute_force_counts(pred, gt, num_classes):
    """Per-pixel loop oracle for the confusion counts."""
    counts = {c: {"tp": 0, "fp": 0, "fn": 0, "tn": 0} for c in range(num_classes + 1)}
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        for c in range(num_classes + 1):
            if p == c and g == c:
                counts[c]["tp"] += 1
            elif p == c and g != c:
                counts[c]["fp"] += 1
            elif p != c and g == c:
                counts[c]["fn"] += 1
            else:
                counts[c]["tn"] += 1
    return counts


# --------------------------------------------------------------------------
# compute_seed_area


def test_all_zero_features_skip_normalization():
    area = compute_seed_area(np.zeros((4, 4, 3)), np.ones((2, 3)), 1)
    np.testing.assert_array_equal(area.map, np.zeros((4, 4)))


def test_single_location_dot_product():
    feats = np.array([[[1.0, 2.0]]])
    w = np.array([[0.5, 0.25]])
    raw = raw_seed_map(feats, w, 1)
    assert raw[0, 0] == pytest.approx(1.0)
    area = compute_seed_area(feats, w, 1)
    assert area.map[0, 0] == pytest.approx(1.0)


def test_negated_weights_negate_raw_map():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(5, 5, 4))
    w = rng.normal(size=(2, 4))
    w[1] = -w[0]
    np.testing.assert_allclose(
        raw_seed_map(feats, w, 2), -raw_seed_map(feats, w, 1), rtol=1e-12
    )


def test_raw_map_linear_in_weights():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(4, 4, 6))
    w1 = rng.normal(size=(1, 6))
    w2 = rng.normal(size=(1, 6))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(
        raw_seed_map(feats, a * w1 + b * w2, 1),
        a * raw_seed_map(feats, w1, 1) + b * raw_seed_map(feats, w2, 1),
        rtol=1e-9,
        atol=1e-12,
    )


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError, match="dim"):
        compute_seed_area(np.zeros((2, 2, 3)), np.zeros((1, 4)), 1)
    with pytest.raises(ValueError, match="class_id"):
        compute_seed_area(np.zeros((2, 2, 3)), np.zeros((1, 3)), 2)


def test_normalized_map_in_unit_range_with_unit_max():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(6, 6, 5))
    w = rng.normal(size=(3, 5))
    area = compute_seed_area(feats, w, 2)
    assert area.map.min() >= 0.0
    assert area.map.max() == pytest.approx(1.0)


# --------------------------------------------------------------------------
# seed_label_map


def test_all_below_threshold_is_background():
    area = SeedArea(1, np.full((3, 3), 0.2))
    out = seed_label_map([area], 0.4)
    np.testing.assert_array_equal(out.labels, np.zeros((3, 3)))


def test_argmax_between_classes():
    a1 = SeedArea(1, np.full((1, 1), 0.9))
    a2 = SeedArea(2, np.full((1, 1), 0.3))
    out = seed_label_map([a2, a1], 0.4)
    assert out.labels[0, 0] == 1


def test_foreground_wins_tie_with_background():
    area = SeedArea(1, np.full((1, 1), 0.4))
    out = seed_label_map([area], 0.4)
    assert out.labels[0, 0] == 1


def test_foreground_tie_resolves_to_lowest_class_id():
    a3 = SeedArea(3, np.full((2, 2), 0.8))
    a2 = SeedArea(2, np.full((2, 2), 0.8))
    out = seed_label_map([a3, a2], 0.4)
    np.testing.assert_array_equal(out.labels, np.full((2, 2), 2))


def test_empty_seed_list_gives_background_map():
    out = seed_label_map([], 0.4, shape=(4, 5))
    np.testing.assert_array_equal(out.labels, np.zeros((4, 5)))


def test_threshold_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        seed_label_map([], 0.0, shape=(2, 2))
    with pytest.raises(ValueError):
        seed_label_map([], 1.0, shape=(2, 2))


# --------------------------------------------------------------------------
# evaluate_seed_metrics


def _label_map(arr):
    return SeedLabelMap(labels=np.asarray(arr, dtype=np.int64))


def test_perfect_prediction():
    gt = _label_map([[0, 1], [2, 0]])
    report = evaluate_seed_metrics(gt, gt, num_classes=2)
    assert report.miou == 1.0
    assert report.mean_fpr == 0.0
    assert report.mean_fnr == 0.0


def test_half_overprediction_hand_counts():
    gt = _label_map([[1, 1, 0, 0]])
    pred = _label_map([[1, 1, 1, 1]])
    report = evaluate_seed_metrics(pred, gt, num_classes=1)
    assert report.per_class[1]["fpr"] == pytest.approx(0.5)
    assert report.per_class[1]["fnr"] == 0.0
    assert report.per_class[1]["iou"] == pytest.approx(0.5)
    # background: tp=0, fp=0, fn=2 -> iou 0; miou = (0 + 0.5) / 2
    assert report.miou == pytest.approx(0.25)


def test_literal_mode_fnr_uses_positive_predictions():
    # tp=2, fp=2, fn=1 for class 1
    gt = _label_map([[1, 1, 1, 0, 0]])
    pred = _label_map([[1, 1, 0, 1, 1]])
    conventional = evaluate_seed_metrics(pred, gt, 1, mode="conventional")
    literal = evaluate_seed_metrics(pred, gt, 1, mode="literal")
    assert conventional.per_class[1]["fnr"] == pytest.approx(1 / 3)
    assert literal.per_class[1]["fnr"] == pytest.approx(1 / 5)
    assert conventional.per_class[1]["fpr"] == literal.per_class[1]["fpr"] == pytest.approx(0.5)


def test_matches_brute_force_oracle_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(50):
        num_classes = int(rng.integers(1, 4))
        shape = (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        pred = rng.integers(0, num_classes + 1, size=shape)
        gt = rng.integers(0, num_classes + 1, size=shape)
        expected = brute_force_counts(pred, gt, num_classes)
        got = confusion_counts(pred, gt, num_classes)
        assert got == expected
        for mode in ("conventional", "literal"):
            report = evaluate_seed_metrics(_label_map(pred), _label_map(gt), num_classes, mode)
            for c in range(1, num_classes + 1):
                k = expected[c]
                denom_iou = k["tp"] + k["fp"] + k["fn"]
                iou = 1.0 if denom_iou == 0 else k["tp"] / denom_iou
                assert report.per_class[c]["iou"] == pytest.approx(iou)


def test_absent_class_scores_iou_one():
    gt = _label_map([[0, 0]])
    pred = _label_map([[0, 0]])
    report = evaluate_seed_metrics(pred, gt, num_classes=2)
    assert report.per_class[1]["iou"] == 1.0
    assert report.per_class[2]["iou"] == 1.0
    assert report.miou == 1.0
    assert any("zero denominator" not in f for f in report.flags) or report.flags == []


def test_zero_denominator_rates_are_flagged():
    gt = _label_map([[1, 1]])
    pred = _label_map([[0, 0]])  # class 1 never predicted: tp+fp = 0
    report = evaluate_seed_metrics(pred, gt, num_classes=1)
    assert report.per_class[1]["fpr"] == 0.0
    assert report.per_class[1]["fnr"] == 1.0
    assert not report.flags  # fp == 0 here, so no misleading rate was zeroed

    report2 = evaluate_seed_metrics(_label_map([[0, 0]]), _label_map([[0, 0]]), 1)
    assert report2.per_class[1]["fnr"] == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        evaluate_seed_metrics(_label_map([[0]]), _label_map([[0, 1]]), 1)


def test_count_additivity_over_disjoint_regions():
    rng = np.random.default_rng(11)
    a_pred = rng.integers(0, 3, size=(4, 6))
    a_gt = rng.integers(0, 3, size=(4, 6))
    b_pred = rng.integers(0, 3, size=(4, 2))
    b_gt = rng.integers(0, 3, size=(4, 2))
    summed = add_counts(confusion_counts(a_pred, a_gt, 2), confusion_counts(b_pred, b_gt, 2))
    union = confusion_counts(
        np.concatenate([a_pred, b_pred], axis=1), np.concatenate([a_gt, b_gt], axis=1), 2
    )
    assert summed == union
    r1 = metrics_from_counts(summed, 2)
    r2 = metrics_from_counts(union, 2)
    assert r1.miou == r2.miou
    assert r1.mean_fpr == r2.mean_fpr
    assert r1.mean_fnr == r2.mean_fnr


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_class_permutation_leaves_means_unchanged(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=(5, 5))
    gt = rng.integers(0, 4, size=(5, 5))
    perm = {0: 0, 1: 3, 2: 1, 3: 2}
    pred_p = np.vectorize(perm.get)(pred)
    gt_p = np.vectorize(perm.get)(gt)
    base = evaluate_seed_metrics(_label_map(pred), _label_map(gt), 3)
    permuted = evaluate_seed_metrics(_label_map(pred_p), _label_map(gt_p), 3)
    assert base.miou == pytest.approx(permuted.miou, abs=1e-12)
    assert base.mean_fpr == pytest.approx(permuted.mean_fpr, abs=1e-12)
    assert base.mean_fnr == pytest.approx(permuted.mean_fnr, abs=1e-12)


def test_report_serialization_round_trip():
    gt = _label_map([[0, 1], [2, 2]])
    pred = _label_map([[0, 1], [2, 0]])
    report = evaluate_seed_metrics(pred, gt, num_classes=2)
    payload = json.loads(report.to_json())
    assert set(payload) == {"per_class", "miou", "mean_fpr", "mean_fnr", "counts", "mode", "flags"}
    assert payload["mode"] == "conventional"
    header, row = report.to_csv_row()
    assert header.split(",")[:4] == ["miou", "mean_fpr", "mean_fnr", "mode"]
    assert len(header.split(",")) == len(row.split(","))
