"""Labeled toy datasets: 2-D Gaussian mixtures, forget/retain splits, IDX images."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Mode:
    center: tuple
    std: float
    label: int


@dataclass(frozen=True)
class MixtureSpec:
    modes: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.modes) < 2:
            raise ValueError("a mixture needs at least two modes")
        if len(self.weights) != len(self.modes):
            raise ValueError("one weight per mode")
        labels = [m.label for m in self.modes]
        if len(set(labels)) != len(labels):
            raise ValueError("mode labels must be distinct")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if any(m.std <= 0 for m in self.modes):
            raise ValueError("mode std must be positive")
        dims = {len(m.center) for m in self.modes}
        if len(dims) != 1:
            raise ValueError("all centers need the same dimension")

    @property
    def centers(self) -> np.ndarray:
        return np.array([m.center for m in self.modes], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.label for m in self.modes], dtype=np.int64)


def ring_mixture(n_modes: int = 8, radius: float = 4.0, std: float = 0.3) -> MixtureSpec:
    """Equal-weight modes evenly spaced on a circle; mode k sits at angle 2πk/n_modes."""
    modes = tuple(
        Mode((radius * np.cos(2 * np.pi * k / n_modes), radius * np.sin(2 * np.pi * k / n_modes)), std, k)
        for k in range(n_modes)
    )
    w = 1.0 / n_modes
    return MixtureSpec(modes, tuple([w] * n_modes))


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    scale: float

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    @classmethod
    def identity(cls, dim: int) -> "Normalization":
        return cls(np.zeros(dim), 1.0)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalization":
        """Center, then divide by the pooled per-coordinate standard deviation."""
        mean = x.mean(axis=0)
        return cls(mean, float(np.sqrt(np.mean((x - mean) ** 2))))


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    norm: Normalization = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or len(self.points) != len(self.labels):
            raise ValueError("points must be (n, dim) with one label per point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset contains non-finite points")
        if self.norm is None:
            self.norm = Normalization.identity(self.points.shape[1])

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def normalized(self) -> np.ndarray:
        return self.norm.normalize(self.points)

    def subset(self, mask) -> "LabeledDataset":
        return LabeledDataset(self.points[mask], self.labels[mask], self.norm)


def sample_mixture(spec: MixtureSpec, n: int, seed: int, norm: Normalization | None = None) -> LabeledDataset:
    """Draw n labeled points. The normalization is fitted to the draw unless given."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(spec.modes), size=n, p=np.asarray(spec.weights))
    stds = np.array([m.std for m in spec.modes])[idx]
    points = spec.centers[idx] + stds[:, None] * rng.standard_normal((n, spec.centers.shape[1]))
    return LabeledDataset(points, spec.labels[idx], norm or Normalization.fit(points))


def split_forget(dataset: LabeledDataset, forget_labels) -> tuple[LabeledDataset, LabeledDataset]:
    """Partition into (D_f, D_r); order within each part is preserved."""
    forget_labels = set(int(l) for l in forget_labels)
    if not forget_labels:
        raise ValueError("forget_labels is empty")
    present = set(np.unique(dataset.labels).tolist())
    unknown = forget_labels - present
    if unknown:
        raise ValueError(f"labels not present in dataset: {sorted(unknown)}")
    mask = np.isin(dataset.labels, sorted(forget_labels))
    return dataset.subset(mask), dataset.subset(~mask)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are mapped 0..255 -> -1..1."""
    with open(Path(images_path), "rb") as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x}")
        rows, cols = struct.unpack(">II", _read_exact(f, 8, "image dimensions"))
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, "pixels"), dtype=np.uint8)
    with open(Path(labels_path), "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(f, n_labels, "labels"), dtype=np.uint8)
    if n_labels != count:
        raise ValueError(f"{count} images but {n_labels} labels")
    points = pixels.reshape(count, rows * cols).astype(np.float64) / 127.5 - 1.0
    return LabeledDataset(points, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())
