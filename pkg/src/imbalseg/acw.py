"""Adaptive class-weight cross-entropy.

Weights come from running per-class pixel counts over everything the model has
trained on so far: rarer classes get larger weights via an inverse-log law,
normalized so the weights always sum to C.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import ConfigError, DataError, LabelMap, NumericError, log_softmax_chw, softmax_chw

DEFAULT_EPSILON = 1.0
DEFAULT_IOTA = 0.05


@dataclass(frozen=True)
class AcwConfig:
    """Pipeline-level switches for adaptive class weighting."""

    enabled: bool = True
    epsilon: float = DEFAULT_EPSILON
    iota: float = DEFAULT_IOTA

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"acw epsilon must be >= 0, got {self.epsilon}")
        if self.iota <= 0:
            raise ConfigError(f"acw iota must be > 0, got {self.iota}")


@dataclass(frozen=True, eq=False)
class RunningClassCounts:
    """Cumulative per-class valid-pixel counts seen during training."""

    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or (counts.size and counts.min() < 0):
            raise DataError("counts must be a non-negative 1-D vector")
        if int(counts.sum()) != self.total:
            raise DataError(f"counts sum {int(counts.sum())} != total {self.total}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, num_classes: int) -> "RunningClassCounts":
        return cls(counts=np.zeros(num_classes, dtype=np.int64), total=0)


@dataclass(frozen=True, eq=False)
class ClassWeights:
    """Positive per-class loss weights summing to C. ``cold_start`` marks the
    uniform fallback used before any pixel has been counted."""

    weights: np.ndarray
    cold_start: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.min() <= 0:
            raise ConfigError("weights must be a positive 1-D vector")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, num_classes: int, cold_start: bool = False) -> "ClassWeights":
        return cls(weights=np.ones(num_classes, dtype=np.float64), cold_start=cold_start)


def update_running_counts(
    running: RunningClassCounts, batch_labels: Iterable[LabelMap]
) -> RunningClassCounts:
    """Add each label map's valid-pixel class counts to the running totals."""
    counts = running.counts.copy()
    for lm in batch_labels:
        counts += lm.class_counts(counts.size)
    return RunningClassCounts(counts=counts, total=int(counts.sum()))


def class_weights(
    running: RunningClassCounts,
    epsilon: float = DEFAULT_EPSILON,
    iota: float = DEFAULT_IOTA,
) -> ClassWeights:
    """w_c proportional to 1 / ln(1 + iota + smoothed frequency), scaled to sum C.

    With no counts yet, every class gets weight 1 (cold start).
    """
    c = running.counts.size
    if running.total == 0:
        return ClassWeights.uniform(c, cold_start=True)
    fbar = (running.counts + epsilon) / (running.total + c * epsilon)
    raw = 1.0 / np.log1p(iota + fbar)
    return ClassWeights(weights=c * raw / raw.sum())


def _batch_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    valid: np.ndarray,
    weights: np.ndarray,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Weighted cross-entropy (and gradient) over a B×C×H×W batch.

    The batch is treated as one pool of pixels: loss = sum over valid pixels of
    w[y] * (-log softmax[y]) / N_valid.
    """
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain NaN or infinite entries")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NumericError("no valid pixels in batch")
    b, c, h, w = logits.shape
    logp = log_softmax_chw(logits)
    lab = labels.astype(np.int64)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    wmap = weights[lab]
    loss = float(-(wmap * picked * valid).sum() / n_valid)
    if not want_grad:
        return loss, None
    grad = softmax_chw(logits)
    b_idx = np.arange(b)[:, None, None]
    y_idx = np.arange(h)[None, :, None]
    x_idx = np.arange(w)[None, None, :]
    grad[b_idx, lab, y_idx, x_idx] -= 1.0
    grad *= (wmap * valid / n_valid)[:, None]
    return loss, grad


def weighted_ce_loss(logits: np.ndarray, labels: LabelMap, weights: ClassWeights) -> float:
    """Mean over valid pixels of w[y] * (-log softmax(logits)[y])."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_dims(logits, labels, weights)
    loss, _ = _batch_ce(
        logits[None], labels.labels[None], labels.valid_mask()[None], weights.weights, False
    )
    return loss


def loss_gradient(logits: np.ndarray, labels: LabelMap, weights: ClassWeights) -> np.ndarray:
    """d(loss)/d(logits): w[y]/N * (softmax - onehot) on valid pixels, else 0."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_dims(logits, labels, weights)
    _, grad = _batch_ce(
        logits[None], labels.labels[None], labels.valid_mask()[None], weights.weights, True
    )
    return grad[0]


def batch_loss_and_grad(
    logits: np.ndarray, labels: np.ndarray, valid: np.ndarray, weights: ClassWeights
) -> tuple[float, np.ndarray]:
    """Loss and gradient over a whole B×C×H×W batch (one pixel pool)."""
    return _batch_ce(np.asarray(logits, dtype=np.float64), labels, valid, weights.weights, True)


def _check_dims(logits: np.ndarray, labels: LabelMap, weights: ClassWeights) -> None:
    if logits.ndim != 3:
        raise DataError(f"logits must be (C, H, W), got {logits.shape}")
    c, h, w = logits.shape
    if (h, w) != (labels.height, labels.width):
        raise DataError(f"logits spatial size {(h, w)} != labels {(labels.height, labels.width)}")
    if weights.weights.size != c:
        raise DataError(f"{weights.weights.size} weights for {c} channels")
    if labels.labels.max(initial=0) >= c:
        raise DataError("label value out of range for logit channels")
