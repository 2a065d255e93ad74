"""Confusion matrices and IoU / mIoU, overall and per weather condition."""

from __future__ import annotations

import csv
import io
import json

import numpy as np

VOID = 255
CONDITIONS = ("fog", "night", "rain", "snow")


class MetricsError(ValueError):
    pass


def empty_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def confusion_update(cm: np.ndarray, predicted: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Add one map pair to ``cm`` in place (rows = truth, columns = prediction)."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise MetricsError(f"prediction {predicted.shape} and truth {truth.shape} differ in shape")
    c = cm.shape[0]
    keep = truth != VOID
    t = truth[keep].astype(np.int64)
    p = predicted[keep].astype(np.int64)
    if t.size and (t.max() >= c or p.min() < 0 or p.max() >= c):
        raise MetricsError("class id outside the confusion matrix")
    cm += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return cm


def confusion_matrix(predicted, truth, num_classes: int) -> np.ndarray:
    return confusion_update(empty_confusion(num_classes), predicted, truth)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class never appears in truth or prediction."""
    if cm.sum() == 0:
        raise MetricsError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def iou(cm: np.ndarray, c: int) -> float:
    return float(per_class_iou(cm)[c])


def miou(cm: np.ndarray) -> float:
    ious = per_class_iou(cm)
    return float(np.nanmean(ious))


def condition_report(matrices, conditions, class_names=None) -> dict:
    """Merge per-sample matrices by condition and score each group."""
    matrices = list(matrices)
    conditions = list(conditions)
    if not matrices:
        raise MetricsError("no samples to report")
    c = matrices[0].shape[0]
    merged = {name: empty_confusion(c) for name in CONDITIONS}
    for cm, cond in zip(matrices, conditions):
        name = CONDITIONS[cond] if isinstance(cond, (int, np.integer)) else cond
        if name not in merged:
            raise MetricsError(f"unknown condition tag {cond!r}")
        merged[name] += cm
    overall = sum(merged.values())
    ious = per_class_iou(overall)
    names = list(class_names) if class_names else [str(i) for i in range(c)]
    return {
        "overall": miou(overall),
        "per_condition": {k: (miou(v) if v.sum() else None) for k, v in merged.items()},
        "per_class": [None if np.isnan(v) else float(v) for v in ious],
        "class_names": names,
        "excluded_classes": [names[i] for i in np.flatnonzero(np.isnan(ious))],
        "confusion": {"overall": overall.tolist(), **{k: v.tolist() for k, v in merged.items()}},
    }


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["miou", *(f"miou_{c}" for c in CONDITIONS)])
    row = [report["overall"], *(report["per_condition"][c] for c in CONDITIONS)]
    writer.writerow(["" if v is None else repr(float(v)) for v in row])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
