"""On-disk artifacts: label/image PNGs, SEGP probability maps, manifests,
overlapping-label resolution, and the desk-scale synthetic dataset generator.

File layout conventions:
  - labels: single-channel 8-bit PNG, values 0..C-1 are classes, 255 = invalid
  - images: RGB PNG (3×8-bit) + NIR PNG (1×8-bit) with the same basename
  - probability maps: SEGP binary (see ``write_prob_map``)
  - manifest: JSON-lines, one sample per line
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import (
    ClassSet,
    ConfigError,
    DataError,
    IGNORE_LABEL,
    InputImage,
    LabelMap,
    ProbMap,
    check_prob_data,
)

SEGP_MAGIC = b"SEGP"
SEGP_VERSION = 1
_SEGP_HEADER = struct.Struct("<4sIIIII")  # magic, version, C, H, W, reserved


# ---------------------------------------------------------------------------
# label maps (PNG)


def read_label_map(path: str | Path, class_set: ClassSet) -> LabelMap:
    """Decode a single-channel 8-bit PNG of class indices; 255 marks invalid."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"label file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"{path}: expected single-channel 8-bit PNG, got mode {img.mode}")
            raw = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DataError(f"{path}: not a decodable image ({exc})") from exc
    invalid = raw == IGNORE_LABEL
    labels = np.where(invalid, 0, raw)
    bad = (labels >= class_set.num_classes) & ~invalid
    if np.any(bad):
        y, x = np.argwhere(bad)[0]
        raise DataError(
            f"{path}: label value {int(raw[y, x])} at (y={y}, x={x}) out of range "
            f"for {class_set.num_classes} classes"
        )
    return LabelMap(labels=labels, valid=~invalid if invalid.any() else None)


def write_label_map(label_map: LabelMap, path: str | Path) -> None:
    """Write a LabelMap as a single-channel PNG; invalid pixels become 255."""
    arr = label_map.labels
    if label_map.valid is not None:
        arr = np.where(label_map.valid, arr, np.uint8(IGNORE_LABEL))
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# images (PNG pairs)


def read_rgb(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"RGB image not found: {path}")
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise DataError(f"{path}: expected 3-channel RGB PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8)


def read_nir(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"NIR image not found: {path}")
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(f"{path}: expected single-channel NIR PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8)


def concat_rgbnir(rgb: np.ndarray, nir: np.ndarray) -> InputImage:
    """Stack an H×W×3 RGB array and an H×W NIR array into a 4×H×W InputImage.

    Integer inputs are assumed to be in [0, 255] and are divided by 255;
    floating inputs must already lie in [0, 1].
    """
    rgb = np.asarray(rgb)
    nir = np.asarray(nir)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"rgb must have shape (H, W, 3), got {rgb.shape}")
    if nir.ndim != 2:
        raise DataError(f"nir must have shape (H, W), got {nir.shape}")
    if rgb.shape[:2] != nir.shape:
        raise DataError(f"rgb size {rgb.shape[:2]} != nir size {nir.shape}")

    def to_unit(arr: np.ndarray) -> np.ndarray:
        if np.issubdtype(arr.dtype, np.integer):
            return arr.astype(np.float64) / 255.0
        return arr.astype(np.float64)

    data = np.concatenate(
        [to_unit(rgb).transpose(2, 0, 1), to_unit(nir)[None]], axis=0
    )
    return InputImage(data=data)


def read_input_image(rgb_path: str | Path, nir_path: str | Path) -> InputImage:
    return concat_rgbnir(read_rgb(rgb_path), read_nir(nir_path))


def write_image_pair(image: InputImage, rgb_path: str | Path, nir_path: str | Path) -> None:
    """Quantize a 4-channel image to the RGB + NIR 8-bit PNG pair."""
    quant = np.round(image.data * 255.0).astype(np.uint8)
    rgb = np.ascontiguousarray(quant[:3].transpose(1, 2, 0))
    Image.fromarray(rgb, mode="RGB").save(rgb_path, format="PNG")
    Image.fromarray(np.ascontiguousarray(quant[3]), mode="L").save(nir_path, format="PNG")


# ---------------------------------------------------------------------------
# SEGP probability maps


def write_prob_map(probs: ProbMap, path: str | Path) -> None:
    """Write a C×H×W map as SEGP: 24-byte header + little-endian float32 payload."""
    c, h, w = probs.data.shape
    header = _SEGP_HEADER.pack(SEGP_MAGIC, SEGP_VERSION, c, h, w, 0)
    payload = np.ascontiguousarray(probs.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_prob_map(path: str | Path) -> ProbMap:
    path = Path(path)
    if not path.exists():
        raise DataError(f"probability map not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _SEGP_HEADER.size:
        raise DataError(f"{path}: truncated SEGP header ({len(blob)} bytes)")
    magic, version, c, h, w, reserved = _SEGP_HEADER.unpack_from(blob)
    if magic != SEGP_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SEGP_VERSION:
        raise DataError(f"{path}: unsupported SEGP version {version}")
    if reserved != 0:
        raise DataError(f"{path}: nonzero reserved field {reserved}")
    expected = _SEGP_HEADER.size + 4 * c * h * w
    if len(blob) != expected:
        raise DataError(
            f"{path}: payload size mismatch, expected {expected} bytes total, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_SEGP_HEADER.size).reshape(c, h, w)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    data = data.astype(np.float64)
    sums = data.sum(axis=0)
    normalized = bool(np.abs(sums - 1.0).max() <= 1e-5) if sums.size else False
    return ProbMap(data=data, normalized=normalized)


# ---------------------------------------------------------------------------
# overlapping labels


@dataclass(frozen=True, eq=False)
class MultiLabelMap:
    """C possibly-overlapping binary masks, one per class."""

    masks: np.ndarray  # C×H×W, values in {0, 1}

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise DataError(f"masks must be 3-D (C, H, W), got {masks.shape}")
        if not np.isin(masks, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        masks = masks.astype(np.uint8)
        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]


def resolve_overlaps(
    multi: MultiLabelMap, priority: list[int] | tuple[int, ...], background_id: int = 0
) -> LabelMap:
    """Assign each pixel the class set in its masks that comes first in ``priority``.

    Pixels set in no mask take ``background_id``.
    """
    c = multi.num_classes
    if sorted(priority) != list(range(c)):
        raise ConfigError(f"priority must be a permutation of 0..{c - 1}, got {priority}")
    rank = np.empty(c, dtype=np.int64)
    for pos, cls in enumerate(priority):
        rank[cls] = pos
    # Per channel: its own rank where the mask is set, else a sentinel past all
    # ranks; the channel argmin is then the winning class.
    ranked = np.where(multi.masks.astype(bool), rank[:, None, None], c)
    winner = np.argmin(ranked, axis=0)
    any_mask = multi.masks.any(axis=0)
    labels = np.where(any_mask, winner, background_id)
    return LabelMap(labels=labels)


def rarity_priority(frequencies: np.ndarray) -> list[int]:
    """Class permutation in ascending frequency order (rarest class wins)."""
    return list(np.argsort(np.asarray(frequencies), kind="stable"))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True, eq=False)
class SampleEntry:
    """One dataset sample: file paths plus cached per-class valid-pixel counts."""

    id: str
    image_rgb: str
    image_nir: str
    label: str
    class_pixel_counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.class_pixel_counts, dtype=np.int64)
        if counts.ndim != 1 or (counts.size and counts.min() < 0):
            raise DataError(f"entry {self.id}: counts must be a non-negative 1-D vector")
        counts.setflags(write=False)
        object.__setattr__(self, "class_pixel_counts", counts)


@dataclass(frozen=True, eq=False)
class SampleManifest:
    """The dataset index: sample entries plus the class vocabulary.

    ``root`` anchors relative paths stored in entries (the manifest's directory
    when loaded from disk).
    """

    entries: tuple[SampleEntry, ...]
    class_set: ClassSet
    root: Path = Path(".")

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "root", Path(self.root))
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids in manifest: {dupes}")
        for e in self.entries:
            if e.class_pixel_counts.size != self.class_set.num_classes:
                raise DataError(
                    f"entry {e.id}: counts length {e.class_pixel_counts.size} != "
                    f"{self.class_set.num_classes} classes"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def validate_files(self) -> None:
        """Check that every referenced file exists."""
        for e in self.entries:
            for p in (e.image_rgb, e.image_nir, e.label):
                if not self.resolve(p).exists():
                    raise DataError(f"entry {e.id}: missing file {self.resolve(p)}")

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def get(self, sample_id: str) -> SampleEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise DataError(f"no entry with id {sample_id!r}")


def save_manifest(manifest: SampleManifest, path: str | Path) -> None:
    """Write JSON-lines: one entry per line with id, paths, and counts."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(
                json.dumps(
                    {
                        "id": e.id,
                        "image_rgb": e.image_rgb,
                        "image_nir": e.image_nir,
                        "label": e.label,
                        "counts": e.class_pixel_counts.tolist(),
                    }
                )
                + "\n"
            )


def load_manifest(
    path: str | Path, class_set: ClassSet | None = None, validate: bool = True
) -> SampleManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    class_set = class_set or ClassSet.default()
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entries.append(
                SampleEntry(
                    id=rec["id"],
                    image_rgb=rec["image_rgb"],
                    image_nir=rec["image_nir"],
                    label=rec["label"],
                    class_pixel_counts=np.asarray(rec["counts"], dtype=np.int64),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
    manifest = SampleManifest(entries=tuple(entries), class_set=class_set, root=path.parent)
    if validate:
        manifest.validate_files()
    return manifest


def load_sample(manifest: SampleManifest, entry: SampleEntry) -> tuple[InputImage, LabelMap]:
    image = read_input_image(manifest.resolve(entry.image_rgb), manifest.resolve(entry.image_nir))
    label = read_label_map(manifest.resolve(entry.label), manifest.class_set)
    if (image.height, image.width) != (label.height, label.width):
        raise DataError(
            f"entry {entry.id}: image size {(image.height, image.width)} != "
            f"label size {(label.height, label.width)}"
        )
    return image, label


def build_manifest(
    rgb_dir: str | Path,
    nir_dir: str | Path,
    label_dir: str | Path,
    class_set: ClassSet | None = None,
    threads: int = 1,
) -> SampleManifest:
    """Index parallel image/label trees, computing per-entry class pixel counts."""
    class_set = class_set or ClassSet.default()
    rgb_dir, nir_dir, label_dir = Path(rgb_dir), Path(nir_dir), Path(label_dir)
    for d in (rgb_dir, nir_dir, label_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    names = {}
    for kind, d in (("rgb", rgb_dir), ("nir", nir_dir), ("label", label_dir)):
        names[kind] = {p.stem for p in d.glob("*.png")}
    all_names = names["rgb"] | names["nir"] | names["label"]
    for stem in sorted(all_names):
        missing = [kind for kind in ("rgb", "nir", "label") if stem not in names[kind]]
        if missing:
            raise DataError(f"sample {stem!r} has no matching {'/'.join(missing)} file")

    def make_entry(stem: str) -> SampleEntry:
        label = read_label_map(label_dir / f"{stem}.png", class_set)
        return SampleEntry(
            id=stem,
            image_rgb=str(rgb_dir / f"{stem}.png"),
            image_nir=str(nir_dir / f"{stem}.png"),
            label=str(label_dir / f"{stem}.png"),
            class_pixel_counts=label.class_counts(class_set.num_classes),
        )

    stems = sorted(all_names)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(make_entry, stems))
    else:
        entries = [make_entry(s) for s in stems]
    return SampleManifest(entries=tuple(entries), class_set=class_set)


# ---------------------------------------------------------------------------
# synthetic data

# Mean (R, G, B, NIR) appearance per default class. Endrow and planter-skip sit
# close to the background mean on purpose: the confusable pairs are what make
# prior rebalancing measurable on this toy task.
_DEFAULT_CLASS_MEANS = np.array(
    [
        (0.36, 0.42, 0.30, 0.46),  # BG  mixed field
        (0.30, 0.52, 0.28, 0.60),  # DP  dense green, high NIR
        (0.55, 0.48, 0.30, 0.38),  # DR  yellow-brown, low NIR
        (0.42, 0.40, 0.28, 0.36),  # EN  near-background
        (0.48, 0.50, 0.26, 0.50),  # ND  yellow-green
        (0.40, 0.36, 0.30, 0.32),  # PS  bare soil, near-background
        (0.22, 0.28, 0.38, 0.12),  # WA  blue, very low NIR
        (0.30, 0.38, 0.36, 0.28),  # WW  grassy-blue
        (0.26, 0.46, 0.24, 0.66),  # WC  very green, very high NIR
    ]
)


def default_class_means(class_set: ClassSet) -> np.ndarray:
    """Per-class mean 4-channel appearance; fixed table for the default set."""
    c = class_set.num_classes
    if c == len(_DEFAULT_CLASS_MEANS):
        return _DEFAULT_CLASS_MEANS.copy()
    rng = np.random.Generator(np.random.PCG64(987_001 + c))
    return rng.uniform(0.15, 0.85, size=(c, 4))


def default_shares(class_set: ClassSet) -> tuple[float, ...]:
    """Background-dominated share vector: 0.92 background, rest split evenly."""
    c = class_set.num_classes
    fg = (1.0 - 0.92) / (c - 1)
    shares = [fg] * c
    shares[class_set.background_id] = 0.92
    return tuple(shares)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a desk-scale imbalanced blob dataset.

    Each foreground class appears in a fixed fraction of the images
    (``presence_prob``) as one elliptical blob whose expected area is scaled so
    the global pixel share matches ``shares``; appearance is the class mean
    color plus Gaussian noise, quantized to 8 bits.
    """

    class_set: ClassSet = field(default_factory=ClassSet.default)
    image_size: int = 64
    num_images: int = 64
    shares: tuple[float, ...] | None = None
    noise: float = 0.18
    presence_prob: float = 0.35
    share_tolerance: float | None = 0.2
    class_means: np.ndarray | None = None

    def __post_init__(self):
        c = self.class_set.num_classes
        shares = self.shares if self.shares is not None else default_shares(self.class_set)
        shares = tuple(float(s) for s in shares)
        if len(shares) != c:
            raise ConfigError(f"expected {c} shares, got {len(shares)}")
        if any(s < 0 for s in shares):
            raise ConfigError("shares must be non-negative")
        if abs(sum(shares) - 1.0) > 1e-9:
            raise ConfigError(f"shares must sum to 1, got {sum(shares):.6f}")
        for cls, s in enumerate(shares):
            if cls != self.class_set.background_id and s > 0.3:
                raise ConfigError(f"foreground share {s} for class {cls} exceeds 0.3")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if self.num_images < 1:
            raise ConfigError("num_images must be at least 1")
        if not 0.0 < self.presence_prob <= 1.0:
            raise ConfigError("presence_prob must lie in (0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        means = self.class_means if self.class_means is not None else default_class_means(self.class_set)
        means = np.asarray(means, dtype=np.float64)
        if means.shape != (c, 4):
            raise ConfigError(f"class_means must have shape ({c}, 4), got {means.shape}")
        if means.min() < 0 or means.max() > 1:
            raise ConfigError("class_means must lie in [0, 1]")
        object.__setattr__(self, "shares", shares)
        object.__setattr__(self, "class_means", means)


def _ellipse_mask(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = ys - cy, xs - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_synthetic_dataset(
    spec: SyntheticSpec, out_dir: str | Path, seed: int
) -> SampleManifest:
    """Write an imbalanced blob dataset (images, labels, manifest) to ``out_dir``.

    Deterministic given ``spec`` and ``seed``. Raises DataError if the realized
    foreground shares drift more than ``spec.share_tolerance`` (relative) from
    the target.
    """
    out_dir = Path(out_dir)
    rgb_dir, nir_dir, label_dir = out_dir / "images_rgb", out_dir / "images_nir", out_dir / "labels"
    try:
        for d in (rgb_dir, nir_dir, label_dir):
            d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory under {out_dir}: {exc}") from exc

    rng = np.random.Generator(np.random.PCG64(seed))
    cs = spec.class_set
    size, n_img = spec.image_size, spec.num_images
    bg = cs.background_id
    fg_classes = [c for c in range(cs.num_classes) if c != bg and spec.shares[c] > 0]

    # Balanced presence design: each foreground class appears in exactly n_c
    # images, with the per-blob area scaled to preserve the global share.
    present: dict[int, set[int]] = {}
    blob_area: dict[int, float] = {}
    for c in fg_classes:
        n_c = max(1, round(spec.presence_prob * n_img))
        present[c] = set(rng.permutation(n_img)[:n_c].tolist())
        blob_area[c] = spec.shares[c] * size * size * n_img / n_c
        r_max = 1.3 * math.sqrt(blob_area[c] / math.pi)
        if 2 * r_max >= size:
            raise ConfigError(
                f"class {c}: blob radius {r_max:.1f} does not fit a {size}px image; "
                "lower its share or presence_prob"
            )

    entries = []
    total_counts = np.zeros(cs.num_classes, dtype=np.int64)
    width = max(4, len(str(n_img - 1)))
    for i in range(n_img):
        labels = np.full((size, size), bg, dtype=np.uint8)
        blobs = []
        for c in fg_classes:
            if i not in present[c]:
                continue
            r0 = math.sqrt(blob_area[c] / math.pi)
            a = r0 * rng.uniform(0.7, 1.3)
            b = r0 * rng.uniform(0.7, 1.3)
            theta = rng.uniform(0.0, math.pi)
            margin = max(a, b)
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            blobs.append((c, _ellipse_mask(size, cy, cx, a, b, theta)))
        for j in rng.permutation(len(blobs)):
            c, mask = blobs[j]
            labels[mask] = c
        noise = rng.normal(0.0, spec.noise, size=(4, size, size))
        image_data = np.clip(spec.class_means[labels].transpose(2, 0, 1) + noise, 0.0, 1.0)

        sample_id = f"sample_{i:0{width}d}"
        label_map = LabelMap(labels=labels)
        image = InputImage(data=image_data)
        write_label_map(label_map, label_dir / f"{sample_id}.png")
        write_image_pair(image, rgb_dir / f"{sample_id}.png", nir_dir / f"{sample_id}.png")
        counts = label_map.class_counts(cs.num_classes)
        total_counts += counts
        entries.append(
            SampleEntry(
                id=sample_id,
                image_rgb=f"images_rgb/{sample_id}.png",
                image_nir=f"images_nir/{sample_id}.png",
                label=f"labels/{sample_id}.png",
                class_pixel_counts=counts,
            )
        )

    manifest = SampleManifest(entries=tuple(entries), class_set=cs, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")

    if spec.share_tolerance is not None:
        realized = total_counts / total_counts.sum()
        for c in fg_classes:
            rel = abs(realized[c] - spec.shares[c]) / spec.shares[c]
            if rel > spec.share_tolerance:
                raise DataError(
                    f"realized share {realized[c]:.4f} for class {cs.names[c]} deviates "
                    f"{rel:.0%} from target {spec.shares[c]:.4f} "
                    f"(tolerance {spec.share_tolerance:.0%})"
                )
    return manifest
