"""Confusion matrix and the derived ACA / macro-F1 / micro-F1 scores.

Rows index the ground truth, columns the prediction.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ConfusionMatrix:
    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes) or (counts < 0).any():
            raise ValueError(f"counts must be a non-negative {num_classes}x{num_classes} grid")
        self.counts = counts.copy()

    def _check(self, c):
        if not 0 <= int(c) < self.num_classes:
            raise ValueError(f"class {c} outside [0, {self.num_classes - 1}]")

    def update(self, truth, predicted):
        self._check(truth)
        self._check(predicted)
        self.counts[int(truth), int(predicted)] += 1
        return self

    def update_batch(self, truths, predictions):
        for t, p in zip(truths, predictions):
            self.update(t, p)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, self.counts / np.maximum(rows, 1), 0.0)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def update(cm, truth, predicted):
    return cm.update(truth, predicted)


def aca(cm, strict=False):
    """Mean of the diagonal of the row-normalised matrix.

    Classes without ground-truth samples are skipped with a warning, or
    raise in strict mode.
    """
    rows = cm.counts.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        if strict:
            raise ValueError(f"classes {empty.tolist()} have no samples")
        log.warning("ACA: skipping classes with no samples: %s", empty.tolist())
    keep = rows > 0
    if not keep.any():
        raise ValueError("confusion matrix is empty")
    diag = np.diag(cm.counts)[keep] / rows[keep]
    return float(diag.mean())


def per_class_f1(cm):
    counts = cm.counts
    tp = np.diag(counts).astype(float)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    f1 = np.zeros(cm.num_classes)
    for c in range(cm.num_classes):
        if predicted[c] == 0 or actual[c] == 0 or tp[c] == 0:
            if predicted[c] == 0 or actual[c] == 0:
                log.debug("F1: class %d has zero support or zero predictions", c)
            continue
        p, r = tp[c] / predicted[c], tp[c] / actual[c]
        f1[c] = 2 * p * r / (p + r)
    return f1


def macro_f1(cm):
    return float(per_class_f1(cm).mean())


def micro_f1(cm):
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    # summed TP/FP/FN make precision and recall both equal trace/total
    return float(np.trace(cm.counts) / total)


def summary(cm):
    return {
        "aca": aca(cm),
        "macro_f1": macro_f1(cm),
        "micro_f1": micro_f1(cm),
        "per_class_f1": per_class_f1(cm).tolist(),
    }


def write_confusion_csv(cm, path, normalized=False):
    values = cm.normalized() if normalized else cm.counts
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["truth\\predicted"] + [str(c) for c in range(cm.num_classes)])
        for i, row in enumerate(values):
            cells = [repr(float(v)) for v in row] if normalized else [str(int(v)) for v in row]
            writer.writerow([str(i)] + cells)


def read_confusion_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    counts = [[int(v) for v in row[1:]] for row in rows]
    return ConfusionMatrix(len(counts), counts)


def write_metrics_json(cm, path):
    Path(path).write_text(json.dumps(summary(cm), indent=2, sort_keys=True) + "\n", encoding="utf-8")
