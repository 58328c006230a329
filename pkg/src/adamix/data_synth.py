"""Deterministic synthetic 2D segmentation data: shapes on textured noise.

Each image holds one or two non-overlapping shapes -- a disk (class 1) or an
axis-aligned rectangle (class 2) -- over a smoothly textured background
(class 0).  Every shape shifts the local intensity up or down by a random
offset, and the whole image receives Gaussian pixel noise before clipping to
[0, 1].  Labels are the exact shape masks.

Generation is a pure function of (dataset seed, sample index), so datasets
are reproducible sample-by-sample and safe to generate in parallel.  The
on-disk form is 8-bit binary PGM plus a checksummed manifest.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MANIFEST_FORMAT_VERSION = 1
SPLITS = ("train_labeled", "train_unlabeled", "val", "test")

# Image composition constants (fractions of a 64-pixel reference edge).
BACKGROUND_LEVEL = 0.45
TEXTURE_AMPLITUDE = 0.12
TEXTURE_SMOOTHING = 8.0
NOISE_SIGMA = 0.1
SHAPE_MARGIN = 2
DISK_RADIUS_RANGE = (6 / 64, 12 / 64)
RECT_HALF_RANGE = (5 / 64, 11 / 64)
OFFSET_RANGE = (0.18, 0.35)
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class DatasetSpec:
    """Counts, split fraction, and geometry of a synthetic dataset."""

    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    labeled_fraction: float = 0.1
    image_size: int = 64
    n_classes: int = 3
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("all split counts must be >= 1")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(
                f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.image_size < 16:
            raise ValueError(
                f"image_size must be >= 16, got {self.image_size}")
        if self.n_classes != 3:
            raise ValueError(
                "the shape vocabulary (background, disk, rectangle) requires "
                f"exactly 3 classes, got {self.n_classes}")

    @property
    def labeled_count(self) -> int:
        return int(np.floor(self.labeled_fraction * self.n_train + 0.5))

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def to_json_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "labeled_fraction": self.labeled_fraction,
            "image_size": self.image_size,
            "n_classes": self.n_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetSpec":
        known = set(cls().to_json_dict())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass
class SampleRecord:
    """One generated sample and its split assignment."""

    id: str
    image: np.ndarray     # float32, (1, H, W), values in [0, 1]
    label: np.ndarray     # int64, (H, W), values in {0, .., C-1}
    split: str


@dataclass(frozen=True)
class ShapeSpec:
    """Placement record kept for constructive verification in tests."""

    kind: str             # "disk" or "rectangle"
    class_index: int
    center: tuple[int, int]
    extent: tuple[float, float]   # (radius, radius) or (half_h, half_w)
    offset: float


def _shape_mask(kind: str, center: tuple[int, int],
                extent: tuple[float, float], size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = center
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= extent[0] ** 2
    half_h, half_w = extent
    return ((np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w))


def _draw_shape(rng: np.random.Generator, size: int
                ) -> tuple[str, tuple[int, int], tuple[float, float]]:
    kind = "disk" if rng.random() < 0.5 else "rectangle"
    if kind == "disk":
        radius = rng.uniform(DISK_RADIUS_RANGE[0] * size,
                             DISK_RADIUS_RANGE[1] * size)
        reach_y = reach_x = radius
        extent = (radius, radius)
    else:
        half_h = rng.uniform(RECT_HALF_RANGE[0] * size,
                             RECT_HALF_RANGE[1] * size)
        half_w = rng.uniform(RECT_HALF_RANGE[0] * size,
                             RECT_HALF_RANGE[1] * size)
        reach_y, reach_x = half_h, half_w
        extent = (half_h, half_w)
    lo_y = SHAPE_MARGIN + int(np.ceil(reach_y))
    hi_y = size - 1 - SHAPE_MARGIN - int(np.ceil(reach_y))
    lo_x = SHAPE_MARGIN + int(np.ceil(reach_x))
    hi_x = size - 1 - SHAPE_MARGIN - int(np.ceil(reach_x))
    if hi_y < lo_y or hi_x < lo_x:
        raise ValueError(
            f"shapes cannot fit inside a {size}x{size} image")
    center = (int(rng.integers(lo_y, hi_y + 1)),
              int(rng.integers(lo_x, hi_x + 1)))
    return kind, center, extent


def sample_content(spec: DatasetSpec, index: int
                   ) -> tuple[np.ndarray, np.ndarray, list[ShapeSpec]]:
    """Render sample ``index``: (image, label, placed shapes).

    Pure in (spec.seed, index); the shape list supports constructive checks
    (each class region is exactly the union of its shapes' masks).
    """
    spec.validate()
    rng = np.random.default_rng((spec.seed, 7919, index))
    size = spec.image_size

    texture = rng.normal(0.0, 1.0, (size, size))
    texture = gaussian_filter(texture, sigma=TEXTURE_SMOOTHING * size / 64)
    texture = texture / max(float(texture.std()), 1e-8) * TEXTURE_AMPLITUDE
    image = BACKGROUND_LEVEL + texture
    label = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)

    shapes: list[ShapeSpec] = []
    n_shapes = int(rng.integers(1, 3))
    for shape_i in range(n_shapes):
        placed = False
        for _ in range(MAX_PLACEMENT_TRIES):
            kind, center, extent = _draw_shape(rng, size)
            mask = _shape_mask(kind, center, extent, size)
            if not (mask & occupied).any():
                placed = True
                break
        if not placed:
            if shape_i == 0:
                raise ValueError(
                    f"could not place any shape in a {size}x{size} image")
            break  # keep the single shape already placed
        sign = 1.0 if rng.random() < 0.5 else -1.0
        offset = sign * rng.uniform(*OFFSET_RANGE)
        class_index = 1 if kind == "disk" else 2
        image = image + offset * mask
        label[mask] = class_index
        occupied |= mask
        shapes.append(ShapeSpec(kind=kind, class_index=class_index,
                                center=center, extent=extent, offset=offset))

    image = image + rng.normal(0.0, NOISE_SIGMA, (size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None, :, :]
    return image, label, shapes


def _split_of(spec: DatasetSpec, index: int) -> str:
    if index < spec.labeled_count:
        return "train_labeled"
    if index < spec.n_train:
        return "train_unlabeled"
    if index < spec.n_train + spec.n_val:
        return "val"
    return "test"


def generate(spec: DatasetSpec) -> list[SampleRecord]:
    """Generate the full dataset, split in index order."""
    spec.validate()
    records = []
    for index in range(spec.total):
        image, label, _ = sample_content(spec, index)
        records.append(SampleRecord(id=f"s{index:04d}", image=image,
                                    label=label, split=_split_of(spec, index)))
    return records


class SegDataset:
    """Record store with a per-split label-read counter.

    Training code must never look at an unlabeled training sample's label;
    the counter makes that auditable -- ``label_reads['train_unlabeled']``
    has to stay 0 through training.
    """

    def __init__(self, records: list[SampleRecord]):
        self._records = {r.id: r for r in records}
        if len(self._records) != len(records):
            raise ValueError("duplicate sample ids")
        self._ids_by_split: dict[str, list[str]] = {s: [] for s in SPLITS}
        for r in records:
            if r.split not in SPLITS:
                raise ValueError(f"unknown split {r.split!r}")
            self._ids_by_split[r.split].append(r.id)
        self.label_reads: Counter[str] = Counter()

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return list(self._ids_by_split[split])

    def image(self, sample_id: str) -> np.ndarray:
        return self._records[sample_id].image

    def label(self, sample_id: str) -> np.ndarray:
        record = self._records[sample_id]
        self.label_reads[record.split] += 1
        return record.label


# --------------------------------------------------------------------------
# On-disk interchange: binary PGM images plus a checksummed manifest.

def _write_pgm(path: Path, array: np.ndarray) -> None:
    if array.dtype != np.uint8 or array.ndim != 2:
        raise ValueError("PGM writer expects a 2D uint8 array")
    header = f"P5\n{array.shape[1]} {array.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + array.tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:2] != b"P5":
        raise ValueError(f"{path} is not a binary PGM file")
    # Header tokens: magic, width, height, maxval; '#' starts a comment.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if len(tokens) < 3:
        raise ValueError(f"{path} has a truncated PGM header")
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(blob[pos:pos + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise ValueError(f"{path}: payload shorter than {width}x{height}")
    return data.reshape(height, width).copy()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export_dataset(records: list[SampleRecord], spec: DatasetSpec,
                   out_dir: str | Path) -> Path:
    """Write images/labels as PGM plus ``manifest.json`` with checksums."""
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        raise FileExistsError(f"{manifest_path} already exists")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    entries = []
    for r in records:
        image_rel = f"images/{r.id}.pgm"
        label_rel = f"labels/{r.id}.pgm"
        quantized = np.floor(r.image[0] * 255.0 + 0.5).astype(np.uint8)
        _write_pgm(out / image_rel, quantized)
        _write_pgm(out / label_rel, r.label.astype(np.uint8))
        entries.append({
            "id": r.id,
            "split": r.split,
            "image": image_rel,
            "label": label_rel,
            "image_sha256": _sha256(out / image_rel),
            "label_sha256": _sha256(out / label_rel),
        })
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "spec": spec.to_json_dict(),
        "records": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def import_dataset(in_dir: str | Path
                   ) -> tuple[DatasetSpec, list[SampleRecord]]:
    """Load an exported dataset, verifying the manifest and checksums."""
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt manifest in {root}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(
            f"unsupported manifest format_version "
            f"{manifest.get('format_version')!r}")
    if "spec" not in manifest or "records" not in manifest:
        raise ValueError("manifest is missing 'spec' or 'records'")
    spec = DatasetSpec.from_json_dict(manifest["spec"])

    records = []
    for entry in manifest["records"]:
        for key in ("id", "split", "image", "label", "image_sha256",
                    "label_sha256"):
            if key not in entry:
                raise ValueError(f"manifest record missing key {key!r}")
        if entry["split"] not in SPLITS:
            raise ValueError(f"unknown split {entry['split']!r} in manifest")
        image_path = root / entry["image"]
        label_path = root / entry["label"]
        for path, expected in ((image_path, entry["image_sha256"]),
                               (label_path, entry["label_sha256"])):
            if not path.exists():
                raise ValueError(f"missing data file {path}")
            if _sha256(path) != expected:
                raise ValueError(f"checksum mismatch for {path}")
        image_u8 = _read_pgm(image_path)
        label_u8 = _read_pgm(label_path)
        if (label_u8 >= spec.n_classes).any():
            raise ValueError(
                f"label {label_path} has values outside the class range")
        records.append(SampleRecord(
            id=entry["id"],
            image=(image_u8.astype(np.float32) / 255.0)[None, :, :],
            label=label_u8.astype(np.int64),
            split=entry["split"],
        ))
    return spec, records


def with_seed(spec: DatasetSpec, seed: int) -> DatasetSpec:
    """The same dataset spec with a different generation seed."""
    return replace(spec, seed=seed)
