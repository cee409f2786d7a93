"""Shared fixtures: synthetic IDX / CIFAR files and the real-data location."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from cpnorm.data import MNIST_FILES, MNIST_IMAGE_MAGIC, MNIST_LABEL_MAGIC, write_idx

REPO = Path(__file__).resolve().parent.parent


def real_data_dir() -> Path | None:
    """First of ``$CPNORM_DATA_DIR``, ``<repo>/data``, ``~/data`` that exists."""
    candidates = [os.environ.get("CPNORM_DATA_DIR"), REPO / "data", Path.home() / "data"]
    for c in candidates:
        if c and Path(c).is_dir():
            return Path(c)
    return None


def synthetic_digits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """28x28 uint8 images whose class is a bright 7x7 block at one of ten positions."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = rng.integers(0, 60, (n, 28, 28)).astype(np.uint8)
    for i, y in enumerate(labels):
        r, c = divmod(int(y), 5)
        images[i, 3 + 12 * r:10 + 12 * r, 1 + 5 * c:8 + 5 * c] = 230
    return images, labels


def write_mnist_dir(root: Path, n_train: int, n_test: int, seed: int = 0) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = synthetic_digits(n, s)
        img_name, lab_name = MNIST_FILES[split]
        write_idx(str(root / img_name), images, MNIST_IMAGE_MAGIC)
        write_idx(str(root / lab_name), labels, MNIST_LABEL_MAGIC)
    return root


def write_cifar_batch(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    """One CIFAR-10 binary batch: per row a label byte then R, G, B planes."""
    rows = np.concatenate([labels.astype(np.uint8)[:, None], images.reshape(len(labels), -1)], axis=1)
    path.write_bytes(rows.astype(np.uint8).tobytes())


def synthetic_cifar(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """3x32x32 uint8 images with a class-coloured 8x8 patch at a class-dependent spot."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = rng.integers(0, 80, (n, 3, 32, 32)).astype(np.uint8)
    for i, y in enumerate(labels):
        r, c = divmod(int(y), 5)
        images[i, int(y) % 3, 4 + 14 * r:12 + 14 * r, 1 + 6 * c:9 + 6 * c] = 250
    return images, labels


@pytest.fixture(scope="session")
def tiny_mnist_dir(tmp_path_factory) -> Path:
    return write_mnist_dir(tmp_path_factory.mktemp("tiny_mnist"), 640, 200)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")
