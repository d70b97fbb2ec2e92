"""Pixel-level segmentation metrics and image-level detection metrics.

Ratios are formed from integer counts with ``Fraction`` and converted to
float only at the end.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np


def _ratio(num: int, den: int) -> float:
    return float(Fraction(int(num), int(den))) if den else 0.0


def confusion_matrix(pred, gt) -> np.ndarray:
    """2x2 counts ``n[i, j]`` = pixels of true class i predicted as class j."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p, g = pred.astype(bool).ravel(), gt.astype(bool).ravel()
    n = np.zeros((2, 2), dtype=np.int64)
    n[0, 0] = np.count_nonzero(~g & ~p)
    n[0, 1] = np.count_nonzero(~g & p)
    n[1, 0] = np.count_nonzero(g & ~p)
    n[1, 1] = np.count_nonzero(g & p)
    return n


def pixel_report(conf: np.ndarray) -> dict:
    """Pixel accuracy, mean accuracy and mean IU from a confusion matrix.

    Classes absent from the ground truth (zero row sum) are left out of the
    class means. Defect-class precision/recall/F1 are included as well.
    """
    conf = np.asarray(conf, dtype=np.int64)
    t = conf.sum(axis=1)
    col = conf.sum(axis=0)
    present = [i for i in range(2) if t[i] > 0]
    acc = [Fraction(int(conf[i, i]), int(t[i])) for i in present]
    iu = [Fraction(int(conf[i, i]), int(t[i] + col[i] - conf[i, i])) for i in present]
    tp, fp, fn = conf[1, 1], conf[0, 1], conf[1, 0]
    precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return {
        "confusion": conf.tolist(),
        "pixel_acc": _ratio(np.trace(conf), conf.sum()),
        "mean_acc": float(sum(acc) / len(acc)) if acc else 0.0,
        "mean_iu": float(sum(iu) / len(iu)) if iu else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def seg_metrics(pred, gt) -> dict:
    return pixel_report(confusion_matrix(pred, gt))


def _check_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError("need at least one positive and one negative label")
    return scores, labels


def classify_metrics(scores, labels, threshold: float) -> dict:
    """Image-level confusion with ``score >= threshold`` meaning defective."""
    scores, labels = _check_labels(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    tn = int(np.count_nonzero(~pred & ~pos))
    return {
        "threshold": float(threshold),
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "accuracy": _ratio(tp + tn, labels.size),
    }


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at every distinct score, descending."""
    scores, labels = _check_labels(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos = int(y.sum())
    tp_cum = np.cumsum(y)
    # the last index of each run of equal scores closes a threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = []
    for e in ends:
        tp = int(tp_cum[e])
        points.append((float(s[e]), _ratio(tp, e + 1), _ratio(tp, n_pos)))
    return points


def select_operating_point(scores, labels) -> float:
    """Threshold with the highest F1; ties go to the lower threshold (fewer misses)."""
    scores, labels = _check_labels(scores, labels)
    n_pos = int(labels.sum())
    best_thr, best_f1 = None, Fraction(-1)
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        tp = int(np.count_nonzero(pred & (labels == 1)))
        # F1 = 2tp / (2tp + fp + fn) and fp + fn = predicted + n_pos - 2tp
        f1 = Fraction(2 * tp, int(pred.sum()) + n_pos)
        if f1 >= best_f1:
            best_thr, best_f1 = float(thr), f1
    return best_thr
