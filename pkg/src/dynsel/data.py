"""Datasets: synthetic two-moons and blobs, IDX (MNIST) and CIFAR-10 binary readers."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

# two-moons: both axes share one scale so the arcs stay circular after mapping
MOONS_SCALE = 4.0
MOONS_SHIFT = (1.5, 1.75)


class DataFormatError(ValueError):
    pass


class IdxMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordLengthError(DataFormatError):
    pass


def data_dir() -> Path:
    """Dataset cache directory (``DES_DATA_DIR``, default ``~/.cache/dynsel``)."""
    return Path(os.environ.get("DES_DATA_DIR", Path.home() / ".cache" / "dynsel"))


def _resolve(path) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return data_dir() / p


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        if not np.all(np.isfinite(self.inputs)) or np.any(self.inputs < 0) or np.any(self.inputs > 1):
            raise ValueError("inputs must be finite and within [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], self.n_classes, self.split)

    def sample(self, n: int, rng: RngStream) -> "Dataset":
        if n >= len(self):
            return self
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))

    def equals(self, other: "Dataset") -> bool:
        return (self.n_classes == other.n_classes and self.split == other.split
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.labels, other.labels))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, inputs=self.inputs, labels=self.labels,
                     n_classes=np.int64(self.n_classes), split=np.array(self.split))
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(_resolve(path), allow_pickle=False) as z:
            return cls(z["inputs"], z["labels"], int(z["n_classes"]), str(z["split"]))


def moons_unmap(points: np.ndarray) -> np.ndarray:
    """Invert the affine map applied by :func:`gen_two_moons`."""
    return np.asarray(points) * MOONS_SCALE - np.array(MOONS_SHIFT)


def gen_two_moons(n: int, noise: float, rng: RngStream, split: str = "train") -> Dataset:
    """Two interleaved half circles mapped into the unit square.

    Class 0 lies on the unit upper arc, class 1 on the lower arc centred at
    (1, 0.5).  Gaussian noise is added before the map; mapped points are
    clipped to [0, 1].
    """
    if n < 2:
        raise ValueError("need n >= 2")
    n0, n1 = (n + 1) // 2, n // 2
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    pts = np.concatenate([outer, inner])
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    mapped = np.clip((pts + np.array(MOONS_SHIFT)) / MOONS_SCALE, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(mapped[order], labels[order], 2, split)


def gen_blobs(n: int, rng: RngStream, centers=((0.25, 0.25), (0.75, 0.75)), spread: float = 0.05,
              split: str = "train") -> Dataset:
    """Isotropic Gaussian blobs, one class per centre, clipped to [0, 1]."""
    centers = np.asarray(centers, dtype=np.float64)
    k = len(centers)
    labels = np.arange(n) % k
    pts = centers[labels] + rng.normal(0.0, spread, size=(n, centers.shape[1]))
    order = rng.permutation(n)
    return Dataset(np.clip(pts, 0.0, 1.0)[order], labels[order], k, split)


def _read_idx(path: Path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndims, raw[4:header])
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(body)}")
    return dims, body[:need]


def load_idx(images_path, labels_path, split: str = "train", n_classes: int = 10) -> Dataset:
    """MNIST-style IDX pair; images become (n, 1, rows, cols) in [0, 1]."""
    img_dims, img_body = _read_idx(_resolve(images_path), IDX_IMAGES_MAGIC, 3)
    lab_dims, lab_body = _read_idx(_resolve(labels_path), IDX_LABELS_MAGIC, 1)
    if img_dims[0] != lab_dims[0]:
        raise CountMismatchError(f"{img_dims[0]} images vs {lab_dims[0]} labels")
    n, rows, cols = img_dims
    images = np.frombuffer(img_body, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    labels = np.frombuffer(lab_body, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, n_classes, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_cifar10_bin(paths, subset: int | None = None, seed: int = 0, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = _resolve(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise RecordLengthError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32) / 255.0)
    ds = Dataset(np.concatenate(images), np.concatenate(labels), 10, split)
    if subset is not None:
        ds = ds.sample(subset, RngStream(seed))
    return ds


def batch_iter(ds: Dataset, batch_size: int, shuffle: bool = False,
               rng: RngStream | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, labels) batches covering every sample once; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
