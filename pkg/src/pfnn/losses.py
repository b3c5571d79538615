"""Cross-entropy, the feature-smoothing penalty, and their weighted sum.

The feature-smoothing loss pulls each sample's feature vector toward
its class centroid, computed dynamically within the batch (no
persistent per-class centers). Gradients flow through both the samples
and the centroids, since a centroid is itself a function of the batch.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clamp,
    gather_rows,
    log,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    sub,
    take_per_row,
)

PROB_FLOOR = 1e-12


def _check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be nonnegative")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")
    return labels.astype(np.intp)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -ln p(true class); rows must already be probabilities.

    Probabilities are clamped to [1e-12, 1] before the log.
    """
    if probs.data.ndim != 2:
        raise ValueError(f"cross_entropy: probs must be (N,C), got {probs.shape}")
    n, c = probs.shape
    labels = _check_labels(labels, n, c)
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        worst = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"cross_entropy: row {worst} sums to {row_sums[worst]!r}, not 1")
    picked = take_per_row(probs, labels)
    return neg(reduce_mean(log(clamp(picked, PROB_FLOOR, 1.0))))


def feature_smoothing_loss(features: Tensor, labels) -> Tensor:
    """Mean over present classes of the mean squared deviation from the
    class centroid.

    Classes absent from the batch are simply absent from the sum; the
    average divides by the number of classes present.
    """
    if features.data.ndim != 2:
        raise ValueError(f"feature_smoothing_loss: features must be (N,D), got {features.shape}")
    n, _ = features.shape
    if n < 1:
        raise ValueError("feature_smoothing_loss: need at least one sample")
    labels = _check_labels(labels, n)
    present = np.unique(labels)
    total = None
    for c in present:
        idx = np.flatnonzero(labels == c)
        class_feats = gather_rows(features, idx)
        centroid = reduce_mean(class_feats, axes=0, keepdims=True)
        dev = sub(class_feats, centroid)
        term = mul(reduce_sum(mul(dev, dev)), Tensor(1.0 / idx.size))
        total = term if total is None else add(total, term)
    return mul(total, Tensor(1.0 / present.size))


def total_loss(probs: Tensor, labels, features: Tensor, lambda_fs: float) -> Tensor:
    """cross_entropy + lambda_fs * feature_smoothing_loss."""
    if lambda_fs < 0:
        raise ValueError(f"total_loss: lambda_fs must be nonnegative, got {lambda_fs}")
    ce = cross_entropy(probs, labels)
    if lambda_fs == 0:
        return ce
    return add(ce, mul(feature_smoothing_loss(features, labels), Tensor(lambda_fs)))
