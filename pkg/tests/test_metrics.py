import json

import numpy as np
import pytest

from dcseg import metrics as m
from dcseg.verify import random_label_map

V = m.VOID


def set_iou(pred, truth, c):
    """Brute-force IoU from pixel coordinate sets."""
    keep = {(i, j) for i, j in np.ndindex(truth.shape) if truth[i, j] != V}
    p = {ij for ij in keep if pred[ij] == c}
    t = {ij for ij in keep if truth[ij] == c}
    union = p | t
    return len(p & t) / len(union) if union else None


def random_pair(rng, classes=4, void_rate=0.1):
    truth = random_label_map(rng, 16, 16, classes)
    truth[rng.random(truth.shape) < void_rate] = V
    pred = np.where(rng.random(truth.shape) < 0.6, truth, rng.integers(0, classes, truth.shape))
    pred[pred == V] = 0
    return pred.astype(np.uint8), truth


def test_perfect_prediction():
    lab = random_label_map(np.random.default_rng(0), 16, 16, 5)
    cm = m.confusion_matrix(lab, lab, 5)
    assert np.count_nonzero(cm - np.diag(np.diag(cm))) == 0
    assert m.miou(cm) == 1.0


def test_all_void_truth_leaves_matrix_unchanged():
    cm = m.empty_confusion(3)
    m.confusion_update(cm, np.zeros((4, 4), np.uint8), np.full((4, 4), V, np.uint8))
    assert cm.sum() == 0


def test_half_iou():
    cm = np.array([[50, 25], [25, 0]])
    assert m.iou(cm, 0) == 0.5


def test_matches_tally_and_set_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pred, truth = random_pair(rng)
        cm = m.confusion_matrix(pred, truth, 4)
        tally = np.zeros((4, 4), np.int64)
        for t, p in zip(truth.ravel(), pred.ravel()):
            if t != V:
                tally[t, p] += 1
        np.testing.assert_array_equal(cm, tally)
        ious = m.per_class_iou(cm)
        for c in range(4):
            ref = set_iou(pred, truth, c)
            if ref is None:
                assert np.isnan(ious[c])
            else:
                assert abs(ious[c] - ref) <= 1e-12


def test_absent_class_excluded():
    cm = m.confusion_matrix(np.array([[0, 1]]), np.array([[0, 1]]), 3)
    assert np.isnan(m.per_class_iou(cm)[2]) and m.miou(cm) == 1.0
    report = m.condition_report([cm], ["fog"], ["a", "b", "c"])
    assert report["excluded_classes"] == ["c"] and report["per_class"][2] is None


def test_errors():
    with pytest.raises(m.MetricsError, match="empty"):
        m.miou(m.empty_confusion(2))
    with pytest.raises(m.MetricsError, match="shape"):
        m.confusion_matrix(np.zeros((2, 2)), np.zeros((2, 3)), 2)
    with pytest.raises(m.MetricsError, match="unknown condition"):
        m.condition_report([np.eye(2, dtype=np.int64)], ["hail"])


def test_relabel_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pred, truth = random_pair(rng, classes=5)
        perm = rng.permutation(5)
        relabel = lambda a: np.where(a == V, V, perm[np.minimum(a, 4)]).astype(np.uint8)  # noqa: E731
        a = m.confusion_matrix(pred, truth, 5)
        b = m.confusion_matrix(relabel(pred), relabel(truth), 5)
        np.testing.assert_array_equal(m.per_class_iou(a), m.per_class_iou(b)[perm])
        assert abs(m.miou(a) - m.miou(b)) <= 1e-12


def test_merge_associativity():
    rng = np.random.default_rng(3)
    pairs = [random_pair(rng) for _ in range(6)]
    merged = sum(m.confusion_matrix(p, t, 4) for p, t in pairs)
    stream = m.confusion_matrix(np.concatenate([p for p, _ in pairs]), np.concatenate([t for _, t in pairs]), 4)
    np.testing.assert_array_equal(merged, stream)


def test_condition_partition_and_single_condition():
    rng = np.random.default_rng(4)
    mats, conds = [], []
    for k in range(12):
        p, t = random_pair(rng)
        mats.append(m.confusion_matrix(p, t, 4))
        conds.append(k % 4)
    report = m.condition_report(mats, conds)
    parts = sum(np.array(report["confusion"][c]) for c in m.CONDITIONS)
    np.testing.assert_array_equal(parts, report["confusion"]["overall"])
    np.testing.assert_array_equal(parts, sum(mats))

    only_rain = m.condition_report(mats[:3], ["rain"] * 3)
    assert only_rain["overall"] == only_rain["per_condition"]["rain"]
    assert only_rain["per_condition"]["fog"] is None


def test_saved_report_matches_recompute(tmp_path):
    rng = np.random.default_rng(5)
    pairs = [random_pair(rng) for _ in range(4)]
    np.savez(tmp_path / "pred.npz", *[p for p, _ in pairs])
    report = m.condition_report([m.confusion_matrix(p, t, 4) for p, t in pairs], [0, 1, 2, 3])
    (tmp_path / "r.json").write_text(m.report_json(report))
    saved = np.load(tmp_path / "pred.npz")
    again = m.condition_report([m.confusion_matrix(saved[f"arr_{i}"], t, 4) for i, (_, t) in enumerate(pairs)],
                               [0, 1, 2, 3])
    assert json.loads((tmp_path / "r.json").read_text()) == json.loads(m.report_json(again))
    header, row = m.report_csv(report).splitlines()
    assert header == "miou,miou_fog,miou_night,miou_rain,miou_snow"
    assert float(row.split(",")[0]) == report["overall"]
