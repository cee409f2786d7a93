"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, subsetting and batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_ROW = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, standardized
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise DataError("labels outside [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


def _read_idx(path: str, magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: file too short for IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise DataError(f"{path}: payload has {actual} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_mnist_raw(image_path: str, label_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Unscaled uint8 images (N, 28, 28) and labels."""
    images = _read_idx(image_path, MNIST_IMAGE_MAGIC, 3)
    labels = _read_idx(label_path, MNIST_LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"image file holds {len(images)} items, label file {len(labels)}")
    return images, labels


def load_mnist(image_path: str, label_path: str, split: str = "train") -> Dataset:
    images, labels = read_mnist_raw(image_path, label_path)
    x = images.astype(np.float32)[:, None] / np.float32(255.0)
    x = (x - np.float32(MNIST_MEAN)) / np.float32(MNIST_STD)
    return Dataset(x, labels.astype(np.int64), split)


def write_idx(path: str, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array in IDX format (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def read_cifar10_raw(paths: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype=np.uint8)
        if raw.size % CIFAR_ROW:
            raise DataError(f"{path}: length {raw.size} is not a multiple of {CIFAR_ROW}")
        rows = raw.reshape(-1, CIFAR_ROW)
        if rows.size and rows[:, 0].max() > 9:
            raise DataError(f"{path}: label byte {int(rows[:, 0].max())} > 9")
        labels.append(rows[:, 0])
        images.append(rows[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DataError("no CIFAR-10 batch files given")
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10(paths: Sequence[str], split: str = "train") -> Dataset:
    images, labels = read_cifar10_raw(paths)
    x = images.astype(np.float32) / np.float32(255.0)
    mean = np.asarray(CIFAR_MEAN, dtype=np.float32)[None, :, None, None]
    std = np.asarray(CIFAR_STD, dtype=np.float32)[None, :, None, None]
    return Dataset((x - mean) / std, labels.astype(np.int64), split)


def load_dataset(name: str, data_dir: str, split: str) -> Dataset:
    """Load a canonical split from ``data_dir`` using the standard file names."""
    if name == "mnist":
        img, lab = MNIST_FILES[split]
        paths = [os.path.join(data_dir, img), os.path.join(data_dir, lab)]
    elif name == "cifar10":
        paths = [os.path.join(data_dir, f) for f in CIFAR_FILES[split]]
    else:
        raise DataError(f"unknown dataset {name!r}")
    for p in paths:
        if not os.path.exists(p):
            raise DataError(f"missing data file {p}")
    if name == "mnist":
        return load_mnist(paths[0], paths[1], split)
    return load_cifar10(paths, split)


def subset(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Seeded random ``fraction`` of ``ds`` (kept in original order)."""
    if fraction >= 1.0:
        return ds
    n = max(1, int(round(fraction * len(ds))))
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.take(idx)


def train_val_split(ds: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out the last ``val_fraction`` of a seeded permutation as validation."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    cut = len(ds) - n_val
    return ds.take(np.sort(perm[:cut]), "train"), ds.take(np.sort(perm[cut:]), "val")


def batch_iter(
    ds: Dataset, batch_size: int, shuffle: bool = False, seed: int | None = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
