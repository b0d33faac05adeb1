"""Ranking and segmentation metrics."""

import numpy as np

from .models import MaskMetrics


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean of precision@r over the ranks r of the positives.

    Scores are ranked descending; ties keep the original order.

    Raises:
        ValueError: no positive label (callers skip such classes)
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind='stable')
    ranked = labels[order]
    ranks = np.flatnonzero(ranked) + 1
    hits = np.arange(1, n_pos + 1)
    return float(np.mean(hits / ranks))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean of average_precision over the classes (columns) with a positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError(f"expected matching N x C matrices, got {scores.shape} and {labels.shape}")
    aps = [
        average_precision(scores[:, c], labels[:, c])
        for c in range(scores.shape[1])
        if labels[:, c].any()
    ]
    if not aps:
        raise ValueError("no class has a positive label")
    return float(np.mean(aps))


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    logits = np.asarray(logits)
    targets = np.asarray(targets).ravel()
    if logits.shape[0] == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def mask_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> MaskMetrics:
    """Precision, recall and F1 of the change class."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth differ in shape: {pred.shape} vs {gt.shape}")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    return metrics_from_counts(tp, fp, fn)


def metrics_from_counts(tp: int, fp: int, fn: int) -> MaskMetrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MaskMetrics(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)
