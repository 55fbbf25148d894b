"""Shared domain types and elementary per-pixel operations.

Everything here is immutable after construction and all operations are pure,
so values can be shared freely across threads. Arrays are stored channel-major
(C, H, W) in double precision; per-class operations are then contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Label value reserved in 8-bit label PNGs for pixels that carry no
# supervision. Class indices are capped at 254 so they can never collide.
IGNORE_LABEL = 255

DEFAULT_CLASS_NAMES = ("BG", "DP", "DR", "EN", "ND", "PS", "WA", "WW", "WC")


class ImbalsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ImbalsegError):
    """Invalid configuration or precondition on user-supplied parameters."""


class DataError(ImbalsegError):
    """Missing, malformed, or inconsistent data (files, arrays, manifests)."""


class NumericError(ImbalsegError):
    """Degenerate arithmetic: NaN inputs, zero-sum pixels, empty reductions."""


# ---------------------------------------------------------------------------
# validation helpers


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def check_labels_array(labels, num_classes: int | None = None) -> np.ndarray:
    """Validate an H×W integer label array and return a frozen uint8 copy."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataError(f"label array must be 2-D (H, W), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"label array must be integer, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 254):
        raise DataError("label values must lie in [0, 254]")
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        bad = np.argwhere(arr >= num_classes)[0]
        raise DataError(
            f"label value {int(arr[tuple(bad)])} at (y={bad[0]}, x={bad[1]}) "
            f"is out of range for {num_classes} classes"
        )
    return _frozen(arr.astype(np.uint8))


def check_valid_mask(valid, shape: tuple[int, int]) -> np.ndarray | None:
    """Validate an optional H×W boolean validity mask against ``shape``."""
    if valid is None:
        return None
    arr = np.asarray(valid)
    if arr.shape != shape:
        raise DataError(f"validity mask shape {arr.shape} != label shape {shape}")
    return _frozen(arr.astype(bool))


def check_prob_data(data) -> np.ndarray:
    """Validate a C×H×W array of non-negative finite reals; frozen float64 copy."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise DataError(f"probability data must be 3-D (C, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("probability data contains NaN or infinite entries")
    if arr.size and arr.min() < 0:
        raise NumericError("probability data contains negative entries")
    return _frozen(arr.copy())


def check_image_data(data) -> np.ndarray:
    """Validate a 4×H×W array with finite values in [0, 1]; frozen float64 copy."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 4:
        raise DataError(f"image data must have shape (4, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("image data contains NaN or infinite entries")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise DataError("image values must lie in [0, 1]")
    return _frozen(arr.copy())


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ClassSet:
    """The label vocabulary: C class names plus the background index."""

    num_classes: int
    names: tuple[str, ...]
    background_id: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 254:
            raise ConfigError(f"num_classes must be in [2, 254], got {self.num_classes}")
        if len(self.names) != self.num_classes:
            raise ConfigError(
                f"expected {self.num_classes} class names, got {len(self.names)}"
            )
        if len(set(self.names)) != len(self.names):
            raise ConfigError("class names must be unique")
        if not 0 <= self.background_id < self.num_classes:
            raise ConfigError(f"background_id {self.background_id} out of range")
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def default(cls) -> "ClassSet":
        """The 9-class farmland-pattern set (background + 8 patterns)."""
        return cls(num_classes=9, names=DEFAULT_CLASS_NAMES, background_id=0)

    def foreground_ids(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.num_classes) if c != self.background_id)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class indices with an optional validity mask (True = counted)."""

    labels: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        labels = check_labels_array(self.labels)
        valid = check_valid_mask(self.valid, labels.shape)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def valid_mask(self) -> np.ndarray:
        """Boolean H×W mask; all pixels are valid when no mask was given."""
        if self.valid is None:
            return np.ones(self.labels.shape, dtype=bool)
        return self.valid

    def class_counts(self, num_classes: int) -> np.ndarray:
        """Valid-pixel count per class, length ``num_classes`` (int64)."""
        vals = self.labels[self.valid_mask()]
        if vals.size and vals.max() >= num_classes:
            raise DataError(
                f"label value {int(vals.max())} out of range for {num_classes} classes"
            )
        return np.bincount(vals.astype(np.int64), minlength=num_classes).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel class scores, channel-major C×H×W, non-negative and finite.

    ``normalized`` flags maps whose per-pixel channel sums equal 1 within 1e-5.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = check_prob_data(self.data)
        if self.normalized:
            sums = data.sum(axis=0)
            if sums.size and np.abs(sums - 1.0).max() > 1e-5:
                raise NumericError(
                    "map flagged normalized but per-pixel sums deviate from 1 "
                    f"by up to {float(np.abs(sums - 1.0).max()):.3g}"
                )
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class InputImage:
    """A 4-channel (R, G, B, NIR) image, channel-major, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", check_image_data(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# elementary operations


def argmax_map(probs: ProbMap) -> LabelMap:
    """Per-pixel argmax; ties broken toward the smallest class index."""
    # np.argmax returns the first (= smallest-index) maximum along the axis.
    return LabelMap(labels=np.argmax(probs.data, axis=0).astype(np.uint8))


def normalize(probs: ProbMap) -> ProbMap:
    """Divide each pixel's channel vector by its sum; flags the result normalized."""
    sums = probs.data.sum(axis=0)
    zero = sums <= 0.0
    if np.any(zero):
        y, x = np.argwhere(zero)[0]
        raise NumericError(f"zero channel sum at pixel (y={y}, x={x})")
    return ProbMap(data=probs.data / sums, normalized=True)


def softmax_chw(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the leading (channel) axis of a (..., C, H, W) array."""
    shifted = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def log_softmax_chw(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the channel axis of a (..., C, H, W) array."""
    shifted = logits - logits.max(axis=-3, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-3, keepdims=True))


def flip_chw(data: np.ndarray, horizontal: bool = False, vertical: bool = False) -> np.ndarray:
    """Mirror a (..., H, W) array along the width and/or height axis."""
    out = data
    if horizontal:
        out = out[..., :, ::-1]
    if vertical:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)
