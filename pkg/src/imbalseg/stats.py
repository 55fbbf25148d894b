"""Per-class pixel statistics over a dataset: counts and frequencies."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ClassSet, DataError
from .dataset import SampleManifest, load_sample


@dataclass(frozen=True, eq=False)
class ClassStats:
    """Pixel count, total, and frequency per class over a dataset."""

    pixel_counts: np.ndarray
    total_valid_pixels: int
    frequencies: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.pixel_counts, dtype=np.int64)
        if counts.ndim != 1 or (counts.size and counts.min() < 0):
            raise DataError("pixel_counts must be a non-negative 1-D vector")
        if int(counts.sum()) != self.total_valid_pixels:
            raise DataError(
                f"pixel counts sum to {int(counts.sum())}, not total {self.total_valid_pixels}"
            )
        freqs = np.asarray(self.frequencies, dtype=np.float64)
        counts.setflags(write=False)
        freqs.setflags(write=False)
        object.__setattr__(self, "pixel_counts", counts)
        object.__setattr__(self, "frequencies", freqs)

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "ClassStats":
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        if total == 0:
            raise DataError("cannot compute frequencies from zero total pixels")
        return cls(
            pixel_counts=counts,
            total_valid_pixels=total,
            frequencies=counts.astype(np.float64) / total,
        )


def count_pixels(manifest: SampleManifest, recount: bool = False) -> ClassStats:
    """Sum cached per-entry class counts; ``recount`` re-decodes the label maps."""
    if len(manifest) == 0:
        raise DataError("manifest is empty")
    c = manifest.class_set.num_classes
    totals = np.zeros(c, dtype=np.int64)
    for entry in manifest.entries:
        if recount:
            _, label = load_sample(manifest, entry)
            totals += label.class_counts(c)
        else:
            totals += entry.class_pixel_counts
    return ClassStats.from_counts(totals)


def _csv_field(text: str) -> str:
    if text == "" or any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def export_stats_csv(stats: ClassStats, class_set: ClassSet, path: str | Path) -> None:
    """Write ``class,count,frequency`` rows, frequencies to 6 decimals."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("class,count,frequency\n")
            for c in range(class_set.num_classes):
                fh.write(
                    f"{_csv_field(class_set.names[c])},{int(stats.pixel_counts[c])},"
                    f"{stats.frequencies[c]:.6f}\n"
                )
    except OSError as exc:
        raise DataError(f"cannot write stats CSV to {path}: {exc}") from exc


def read_stats_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Parse a stats CSV back into (names, counts, frequencies)."""
    names, counts, freqs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["class", "count", "frequency"]:
            raise DataError(f"{path}: unexpected header {header}")
        for row in reader:
            names.append(row[0])
            counts.append(int(row[1]))
            freqs.append(float(row[2]))
    return names, np.asarray(counts, dtype=np.int64), np.asarray(freqs)
