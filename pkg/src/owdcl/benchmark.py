"""Seeded synthetic open-world benchmark and the OWDS dataset file format.

Source classes are faint two-blob templates at class-specific positions. Target streams mix corrupted
source-class samples (weak OOD) with grating patterns from classes that never
appear in the source domain (strong OOD).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecInvalid

DATASET_MAGIC = b"OWDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIHHHH")

CORRUPTIONS = ("gaussian_noise", "box_blur", "contrast_reduce")
NOISE_SIGMA = (0.05, 0.10, 0.15, 0.20, 0.25)
CONTRAST_FACTOR = (0.9, 0.8, 0.7, 0.6, 0.5)
TEMPLATE_PEAK = 0.2
BLOBS_PER_CLASS = 2

# independent RNG streams derived from the master seed
_STREAM_TEMPLATES = 1
_STREAM_SOURCE = 2
_STREAM_TARGET = 3
_STREAM_STRONG_FAMILIES = 4


@dataclass(frozen=True)
class DatasetSpec:
    num_source_classes: int = 6
    num_strong_classes: int = 3
    samples_per_class: int = 200
    target_size: int = 2560
    height: int = 16
    width: int = 16
    corruption: str = "gaussian_noise"
    severity: int = 3
    strong_ratio: float = 0.5
    seed: int = 1337

    def validate(self) -> None:
        if self.num_source_classes < 1 or self.num_strong_classes < 1:
            raise SpecInvalid("need at least one source and one strong class")
        if self.samples_per_class < 1 or self.target_size < 0:
            raise SpecInvalid("sample counts must be positive")
        if self.height < 4 or self.width < 4 or self.height > 0xFFFF or self.width > 0xFFFF:
            raise SpecInvalid("image side must lie in [4, 65535]")
        if self.num_source_classes + self.num_strong_classes > 0xFFFF:
            raise SpecInvalid("too many classes for the u16 label field")
        if self.corruption not in CORRUPTIONS:
            raise SpecInvalid(f"corruption must be one of {CORRUPTIONS}, got {self.corruption!r}")
        if not 0 <= self.severity <= 5:
            raise SpecInvalid("severity must lie in 0..5")
        if not 0.0 <= self.strong_ratio <= 1.0:
            raise SpecInvalid("strong_ratio must lie in [0, 1]")

    @property
    def input_dim(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    labels: np.ndarray  # int64, 1..m source, m+1..m+n strong
    images: np.ndarray  # (N, h, w) float64 holding float32-representable values
    num_source_classes: int
    num_strong_classes: int

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def __len__(self) -> int:
        return len(self.labels)

    def equals(self, other: "Dataset") -> bool:
        return (self.num_source_classes == other.num_source_classes
                and self.num_strong_classes == other.num_strong_classes
                and np.array_equal(self.labels, other.labels)
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes())

    def is_weak(self) -> np.ndarray:
        return self.labels <= self.num_source_classes


def _rng(spec: DatasetSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream])


def _to_f32(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0).astype(np.float32).astype(np.float64)


def make_templates(spec: DatasetSpec) -> np.ndarray:
    """Faint two-blob template per source class, peak value ``TEMPLATE_PEAK``.

    Blob centres come from a regular anchor grid and no two classes share an
    anchor (while the grid has room), so classes differ by layout rather than
    by brightness.
    """
    spec.validate()
    rng = _rng(spec, _STREAM_TEMPLATES)
    h, w, m = spec.height, spec.width, spec.num_source_classes
    side = max(4, int(np.ceil(np.sqrt(BLOBS_PER_CLASS * m))))
    anchors = [(y, x) for y in np.linspace(2.5, h - 3.5, side) for x in np.linspace(2.5, w - 3.5, side)]
    order = rng.permutation(len(anchors))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    templates = np.zeros((m, h, w))
    for k in range(m):
        for b in range(BLOBS_PER_CLASS):
            cy, cx = anchors[order[(k * BLOBS_PER_CLASS + b) % len(anchors)]]
            sigma = rng.uniform(0.08, 0.12) * min(h, w)
            templates[k] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        templates[k] *= TEMPLATE_PEAK / templates[k].max()
    return templates


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _source_sample(template: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-1, 2, size=2)
    img = _shift(template, int(dy), int(dx)) * rng.uniform(0.85, 1.15)
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _strong_families(spec: DatasetSpec) -> list[tuple[str, float, float]]:
    rng = _rng(spec, _STREAM_STRONG_FAMILIES)
    fams = []
    for j in range(spec.num_strong_classes):
        kind = "stripes" if j % 2 == 0 else "checker"
        theta = np.pi * j / spec.num_strong_classes + rng.uniform(0.0, np.pi / 8)
        freq = rng.uniform(0.12, 0.3)
        fams.append((kind, float(theta), float(freq)))
    return fams


def _strong_sample(family: tuple[str, float, float], h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    kind, theta, freq = family
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0.0, 2 * np.pi)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    wave = np.sin(2 * np.pi * freq * u + phase)
    if kind == "checker":
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        wave = wave * np.sin(2 * np.pi * freq * v + rng.uniform(0.0, 2 * np.pi))
    img = 0.5 + 0.5 * rng.uniform(0.7, 1.0) * wave
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    return sum(p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)) / 9.0


def corrupt(img: np.ndarray, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption at severity 1..5; severity 0 is the identity."""
    if severity == 0:
        return img.copy()
    if kind == "gaussian_noise":
        out = img + rng.normal(0.0, NOISE_SIGMA[severity - 1], size=img.shape)
    elif kind == "box_blur":
        out = img
        for _ in range(severity):
            out = _box_blur(out)
    elif kind == "contrast_reduce":
        mean = img.mean()
        out = (img - mean) * CONTRAST_FACTOR[severity - 1] + mean
    else:
        raise SpecInvalid(f"unknown corruption {kind!r}")
    return np.clip(out, 0.0, 1.0)


def generate_source(spec: DatasetSpec, templates: np.ndarray | None = None) -> Dataset:
    """Balanced clean source set, classes in label order."""
    spec.validate()
    templates = make_templates(spec) if templates is None else templates
    rng = _rng(spec, _STREAM_SOURCE)
    m, per = spec.num_source_classes, spec.samples_per_class
    labels = np.repeat(np.arange(1, m + 1), per)
    images = np.stack([_source_sample(templates[k - 1], rng) for k in labels])
    return Dataset(labels.astype(np.int64), _to_f32(images), m, spec.num_strong_classes)


def generate_target(spec: DatasetSpec, templates: np.ndarray | None = None) -> Dataset:
    """Shuffled stream of corrupted weak-OOD and strong-OOD records."""
    spec.validate()
    templates = make_templates(spec) if templates is None else templates
    if templates.shape != (spec.num_source_classes, spec.height, spec.width):
        raise SpecInvalid("templates do not match the dataset spec")
    rng = _rng(spec, _STREAM_TARGET)
    m, n = spec.num_source_classes, spec.num_strong_classes
    n_strong = int(round(spec.target_size * spec.strong_ratio))
    n_weak = spec.target_size - n_strong
    families = _strong_families(spec)
    labels = np.concatenate([np.arange(n_weak) % m + 1, np.arange(n_strong) % n + m + 1]).astype(np.int64)
    images = np.zeros((len(labels), spec.height, spec.width))
    for i, y in enumerate(labels):
        if y <= m:
            clean = _source_sample(templates[y - 1], rng)
        else:
            clean = _strong_sample(families[y - m - 1], spec.height, spec.width, rng)
        images[i] = corrupt(clean, spec.corruption, spec.severity, rng)
    order = rng.permutation(len(labels))
    return Dataset(labels[order], _to_f32(images[order]), m, n)


def _record_dtype(h: int, w: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("pixels", "<f4", (h * w,))])


def write_dataset(path, ds: Dataset) -> None:
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), ds.height, ds.width,
                          ds.num_source_classes, ds.num_strong_classes)
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.height, ds.width))
    rec["label"] = ds.labels
    rec["pixels"] = ds.images.reshape(len(ds), ds.height * ds.width)
    Path(path).write_bytes(header + rec.tobytes())


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, h, w, m, n = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC.decode()!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    dtype = _record_dtype(h, w)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} records, found {len(data)}")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    if count and (labels.min() < 1 or labels.max() > m + n):
        raise FormatError(f"{path}: label outside 1..{m + n}")
    images = rec["pixels"].astype(np.float64).reshape(count, h, w)
    return Dataset(labels, images, m, n)
