"""
Datasets for desk-scale experiments: seeded synthetic spirals and blobs, and
IDX-format image/label files.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from delaypipe.errors import IdxFormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8

# File names tried by load_idx_dataset, train then test.
IDX_FILE_NAMES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def num_features(self) -> int:
        return self.x_train.shape[1]


def _split(x: np.ndarray, y: np.ndarray, num_classes: int, rng: np.random.Generator) -> Dataset:
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    n_train = int(round(TRAIN_FRACTION * len(x)))
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], num_classes)


def _class_counts(classes: int, samples: int):
    base, extra = divmod(samples, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def generate_spiral(classes: int, samples: int, noise: float, seed: int) -> Dataset:
    """Interleaved 2-D spiral arms, one per class, split 80/20."""
    if classes < 2:
        raise ValueError(f"A spiral needs at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, n in enumerate(_class_counts(classes, samples)):
        r = np.linspace(0.05, 1.0, n)
        theta = c * 2 * math.pi / classes + 4.0 * r + noise * rng.standard_normal(n)
        xs.append(np.column_stack([r * np.sin(theta), r * np.cos(theta)]))
        ys.append(np.full(n, c, dtype=np.int64))
    return _split(np.concatenate(xs), np.concatenate(ys), classes, rng)


def generate_blobs(classes: int, samples: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs centred on a circle of radius 3."""
    if classes < 2:
        raise ValueError(f"Blobs need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, n in enumerate(_class_counts(classes, samples)):
        angle = 2 * math.pi * c / classes
        centre = np.array([3.0 * math.cos(angle), 3.0 * math.sin(angle)])
        xs.append(centre + spread * rng.standard_normal((n, 2)))
        ys.append(np.full(n, c, dtype=np.int64))
    return _split(np.concatenate(xs), np.concatenate(ys), classes, rng)


def read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(raw)} while reading the magic number")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(raw)} while reading {ndim} dimensions")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(raw)}, expected {header + size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Images flattened to (n, rows*cols) and scaled to [0, 1]; labels as int64."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"Image count {images.shape[0]} does not match label count {labels.shape[0]}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def load_idx_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    (train_images, train_labels), (test_images, test_labels) = IDX_FILE_NAMES
    x_train, y_train = load_idx(directory / train_images, directory / train_labels)
    x_test, y_test = load_idx(directory / test_images, directory / test_labels)
    num_classes = int(max(y_train.max(initial=0), y_test.max(initial=0))) + 1
    logger.info(f"Loaded IDX dataset from {directory}: {len(x_train)} train, {len(x_test)} test, {num_classes} classes")
    return Dataset(x_train, y_train, x_test, y_test, num_classes)


def save_idx(path: Union[str, Path], array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file; 1-D arrays get the label magic."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = magic.to_bytes(4, "big") + np.asarray(array.shape, dtype=">u4").tobytes()
    Path(path).write_bytes(header + array.tobytes())
