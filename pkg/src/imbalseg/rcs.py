"""Rare-class sampling: a temperature softmax over (1 - frequency) picks a
class, then a training image containing enough pixels of that class."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DataError
from .dataset import SampleManifest
from .stats import ClassStats

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.01
DEFAULT_MIN_PIXELS = 1000


@dataclass(frozen=True)
class RcsConfig:
    """Pipeline-level switches for rare-class sampling."""

    enabled: bool = True
    temperature: float = DEFAULT_TEMPERATURE
    min_pixels: int = DEFAULT_MIN_PIXELS
    include_background: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"rcs temperature must be > 0, got {self.temperature}")
        if self.min_pixels < 1:
            raise ConfigError(f"rcs min_pixels must be >= 1, got {self.min_pixels}")


@dataclass(frozen=True, eq=False)
class ClassDistribution:
    """Class-sampling probabilities (non-negative, summing to 1)."""

    probs: np.ndarray
    temperature: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigError("probs must be non-negative and sum to 1 within 1e-12")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True, eq=False)
class ClassImageIndex:
    """Per-class lists of sample ids with at least ``min_pixels`` of the class."""

    ids_by_class: tuple[tuple[str, ...], ...]
    min_pixels: int


def rcs_distribution(
    stats: ClassStats,
    temperature: float = DEFAULT_TEMPERATURE,
    include_background: bool = False,
    background_id: int = 0,
) -> ClassDistribution:
    """P(c) = exp((1 - f_c)/T) / sum over included classes; excluded get 0.

    Computed with the max-subtraction trick so tiny temperatures stay finite.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    f = stats.frequencies
    c = f.size
    included = np.ones(c, dtype=bool)
    if not include_background:
        included[background_id] = False
    if not included.any():
        raise ConfigError("no classes left to sample from")
    x = (1.0 - f[included]) / temperature
    e = np.exp(x - x.max())
    probs = np.zeros(c, dtype=np.float64)
    probs[included] = e / e.sum()
    return ClassDistribution(probs=probs, temperature=temperature)


def sample_class(dist: ClassDistribution, rng: np.random.Generator) -> int:
    """Draw one class index from the distribution."""
    cdf = np.cumsum(dist.probs)
    cdf /= cdf[-1]
    return int(np.searchsorted(cdf, rng.random(), side="right"))


def build_class_index(manifest: SampleManifest, min_pixels: int = DEFAULT_MIN_PIXELS) -> ClassImageIndex:
    """Index sample ids by the classes they contain with >= min_pixels pixels."""
    if min_pixels < 1:
        raise ConfigError(f"min_pixels must be >= 1, got {min_pixels}")
    c = manifest.class_set.num_classes
    buckets: list[list[str]] = [[] for _ in range(c)]
    for entry in manifest.entries:
        for cls in range(c):
            if entry.class_pixel_counts[cls] >= min_pixels:
                buckets[cls].append(entry.id)
    for cls in range(c):
        if not buckets[cls]:
            logger.warning(
                "class %s has no sample with >= %d pixels; sampling it will fail",
                manifest.class_set.names[cls],
                min_pixels,
            )
    return ClassImageIndex(
        ids_by_class=tuple(tuple(b) for b in buckets), min_pixels=min_pixels
    )


def sample_image_for_class(index: ClassImageIndex, cls: int, rng: np.random.Generator) -> str:
    """Uniform draw from the ids indexed under ``cls``."""
    ids = index.ids_by_class[cls]
    if not ids:
        raise DataError(f"no indexed samples contain class {cls}")
    return ids[int(rng.integers(len(ids)))]
