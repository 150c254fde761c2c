"""Distance-weighted log-softmax ("grading") loss and the plain cross-entropy baseline.

For true class ``y`` among ``C`` ordinal classes the per-example weight is
``(|argmax(x) - y| + 1) / M(y)`` with ``M(y) = sum_i (|y - i| + 1)``, so the
weights over all possible predictions sum to one.  The weight is a constant
of the backward pass.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LOSS_KINDS = ("grading", "cross_entropy")


def _check_class(y, num_classes):
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if not 0 <= int(y) < num_classes:
        raise ValueError(f"class index {y} outside [0, {num_classes - 1}]")


def normalizer(y, num_classes):
    """Exact integer ``M(y)``."""
    _check_class(y, num_classes)
    return sum(abs(int(y) - i) + 1 for i in range(num_classes))


def argmax_lowest(logits):
    """Row-wise argmax; ties resolve to the lowest index (numpy's rule)."""
    return np.argmax(np.asarray(logits), axis=-1)


def weight_fraction(predicted, y, num_classes):
    _check_class(predicted, num_classes)
    return Fraction(abs(int(predicted) - int(y)) + 1, normalizer(y, num_classes))


def weight_table(num_classes):
    """``table[y][a]`` = exact weight for true class y predicted as a."""
    return [[weight_fraction(a, y, num_classes) for a in range(num_classes)]
            for y in range(num_classes)]


def weight(logits, y):
    """Weight for one logit vector as an exact fraction."""
    x = np.asarray(getattr(logits, "data", logits))
    return weight_fraction(int(argmax_lowest(x)), y, x.shape[-1])


def batch_weights(logits, labels):
    x = np.asarray(getattr(logits, "data", logits))
    c = x.shape[-1]
    table = np.array([[float(w) for w in row] for row in weight_table(c)])
    return table[np.asarray(labels), argmax_lowest(x)]


def _as_batch(logits, labels):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("loss", logits.shape, labels.shape)
    for y in labels:
        _check_class(y, logits.shape[1])
    return logits, labels


def _reduce(per_example, reduction):
    if reduction == "mean":
        return T.mean_all(per_example)
    if reduction == "sum":
        return T.sum_all(per_example)
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy_baseline(logits, labels, reduction="mean"):
    """Negative log-softmax at the true class."""
    logits, labels = _as_batch(logits, labels)
    nll = T.mul(T.pick(T.log_softmax(logits), labels), -1.0)
    return _reduce(nll, reduction)


def grading_loss(logits, labels, reduction="mean"):
    """Cross-entropy scaled per example by the ordinal-distance weight."""
    logits, labels = _as_batch(logits, labels)
    w = Tensor(batch_weights(logits.data, labels))
    nll = T.mul(T.pick(T.log_softmax(logits), labels), -1.0)
    return _reduce(T.mul(w, nll), reduction)


def get_loss(kind):
    if kind == "grading":
        return grading_loss
    if kind == "cross_entropy":
        return cross_entropy_baseline
    raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")
