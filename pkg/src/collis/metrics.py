"""Confusion matrices, IoU, pseudo-label quality and confirmation-bias diagnostics.

This is the only module allowed to open the sealed ground truth of the
unlabeled scenes (see :func:`sealed_truth`).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import _METRICS_KEY, DatasetSplit
from .losses import P_MIN


def sealed_truth(split: DatasetSplit, index: int) -> np.ndarray:
    """Diagnostic labels of unlabeled scene `index`; never feed these to training."""
    return split.sealed._reveal(_METRICS_KEY, index)


class ConfusionMatrix:
    """K x K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), np.int64) if counts is None else counts

    def accumulate(self, truths, predictions, mask=None) -> ConfusionMatrix:
        truths = np.asarray(truths, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if truths.shape != predictions.shape:
            raise ValueError("truths and predictions must have the same shape")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            truths, predictions = truths[mask], predictions[mask]
        k = self.num_classes
        flat = np.bincount(k * truths + predictions, minlength=k * k)
        self.counts += flat.reshape(k, k)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou_from_matrix(matrix: ConfusionMatrix | np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where undefined) and the mean over classes present in the ground truth."""
    m = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    tp = np.diag(m).astype(np.float64)
    rows = m.sum(axis=1)
    denom = rows + m.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = rows > 0
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    return iou, miou


def retention_and_accuracy(retained, pseudo_labels, truths, eligible=None) -> tuple[float, float | None]:
    """Fraction of eligible points retained and accuracy of the retained labels."""
    retained = np.asarray(retained, dtype=bool)
    eligible = np.ones_like(retained) if eligible is None else np.asarray(eligible, dtype=bool)
    n_eligible = int(np.count_nonzero(eligible))
    n_kept = int(np.count_nonzero(retained & eligible))
    rate = n_kept / n_eligible if n_eligible else 0.0
    if n_kept == 0:
        return rate, None
    keep = retained & eligible
    correct = int(np.count_nonzero(np.asarray(pseudo_labels)[keep] == np.asarray(truths)[keep]))
    return rate, correct / n_kept


def uniform_cross_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy of the predicted distribution against the uniform prior."""
    probs = np.asarray(probs, dtype=np.float64)
    return -np.log(np.clip(probs, P_MIN, 1.0)).sum(axis=1) / probs.shape[1]


def certainty_of_incorrect(probs, predictions, truths) -> float | None:
    """Mean uniform-prior cross-entropy over the wrongly predicted points (None if none are wrong).

    Larger values mean more confident mistakes; the minimum ln K is reached
    by uniform distributions.
    """
    wrong = np.asarray(predictions) != np.asarray(truths)
    if not wrong.any():
        return None
    return float(np.mean(uniform_cross_entropy(np.asarray(probs)[wrong])))


def write_iou_csv(rows: list[dict], class_names, path: str | Path) -> None:
    """One line per (epoch, student) with per-class IoU and mIoU."""
    fields = ["epoch", "student", *class_names, "miou"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
