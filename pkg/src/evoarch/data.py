"""Dataset loading and preprocessing.

Parses the canonical MNIST IDX files and CIFAR-10 binary batches from
local disk (no downloading here; fetch the files yourself and point
EVOARCH_DATA_DIR or the CLI flags at them).  Preprocessing covers
per-image global contrast normalization and the pad-then-random-crop
augmentation used on CIFAR training batches.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_DIR = "cifar-10-batches-bin"
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

DATA_DIR_ENV = "EVOARCH_DATA_DIR"


class DataError(Exception):
    """Base class for dataset parsing problems."""


class BadMagic(DataError):
    """File does not start with the expected magic number."""


class TruncatedFile(DataError):
    """File ends before the declared payload."""


class CountMismatch(DataError):
    """Image and label files disagree on the record count."""


class LabelOutOfRange(DataError):
    """A class label falls outside the valid range."""


@dataclass
class DatasetSplit:
    """Train/validation (and optional test) tensors plus provenance."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray | None = None
    test_y: np.ndarray | None = None
    num_classes: int = 10
    preprocessing: str = "scale"
    augment: str = "none"
    seed: int = 0

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])


def _read_bytes(path):
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _parse_idx_images(raw, path):
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes for {count} images, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, 1, rows, cols)


def _parse_idx_labels(raw, path):
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: header needs 8 bytes, file has {len(raw)}")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != MNIST_LABEL_MAGIC:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}")
    if len(raw) < 8 + count:
        raise TruncatedFile(f"{path}: expected {8 + count} bytes for {count} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_mnist(image_path, label_path):
    """(images, labels) from an IDX pair: float32 in [0, 1], shape (n, 1, r, c)."""
    images = _parse_idx_images(_read_bytes(image_path), image_path)
    labels = _parse_idx_labels(_read_bytes(label_path), label_path)
    if len(images) != len(labels):
        raise CountMismatch(f"{image_path} has {len(images)} images but {label_path} has {len(labels)} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def load_cifar10(batch_paths):
    """(images, labels) from binary batches: float32 in [0, 1], (n, 3, 32, 32)."""
    all_images, all_labels = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise TruncatedFile(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        bad = np.nonzero(labels > 9)[0]
        if bad.size:
            raise LabelOutOfRange(f"{path}: record {bad[0]} has label {labels[bad[0]]}")
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        all_labels.append(labels)
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def global_contrast_normalize(images):
    """Per image: subtract its mean, divide by max(its std, 1e-8)."""
    flat = images.reshape(len(images), -1)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    out = (flat - mean) / np.maximum(std, 1e-8)
    return out.reshape(images.shape).astype(np.float32)


def pad_and_random_crop(image, pad, rng):
    """Zero-pad each spatial side by pad, then crop back at a random offset."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    return padded[:, oy : oy + h, ox : ox + w]


def split_train_val(images, labels, fraction=0.1, seed=0, subset_n=None):
    """Seeded shuffle split; the last fraction becomes validation.

    subset_n truncates the data (in file order) before shuffling, so small
    desk-scale experiments stay nested inside larger ones.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must be in (0, 1)")
    if subset_n is not None:
        images = images[:subset_n]
        labels = labels[:subset_n]
    n = len(images)
    n_val = int(round(n * fraction))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"cannot carve {n_val} validation samples out of {n}")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx, val_idx = perm[: n - n_val], perm[n - n_val :]
    return DatasetSplit(
        train_x=images[train_idx],
        train_y=labels[train_idx],
        val_x=images[val_idx],
        val_y=labels[val_idx],
        seed=seed,
    )


def resolve_data_dir(explicit=None):
    """CLI flag wins, then the EVOARCH_DATA_DIR environment variable."""
    if explicit:
        return explicit
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return env
    raise DataError(f"no data directory: pass one explicitly or set {DATA_DIR_ENV}")


def _find(data_dir, name):
    for candidate in (os.path.join(data_dir, name), os.path.join(data_dir, name + ".gz")):
        if os.path.exists(candidate):
            return candidate
    raise DataError(f"missing dataset file {name} (or {name}.gz) under {data_dir}")


def load_dataset(name, data_dir, subset_n=None, seed=0, val_fraction=0.1):
    """Assemble a ready-to-train split for "mnist" or "cifar10".

    MNIST stays at plain [0, 1] scaling; CIFAR-10 gets per-image contrast
    normalization and pad-4 random-crop augmentation on the train side.
    """
    if name == "mnist":
        train_x, train_y = load_mnist(
            _find(data_dir, MNIST_FILES["train_images"]), _find(data_dir, MNIST_FILES["train_labels"])
        )
        test_x, test_y = load_mnist(
            _find(data_dir, MNIST_FILES["test_images"]), _find(data_dir, MNIST_FILES["test_labels"])
        )
        split = split_train_val(train_x, train_y, val_fraction, seed, subset_n)
        split.test_x, split.test_y = test_x, test_y
        split.preprocessing = "scale"
        return split
    if name == "cifar10":
        base = os.path.join(data_dir, CIFAR_DIR)
        root = base if os.path.isdir(base) else data_dir
        train_x, train_y = load_cifar10([_find(root, f) for f in CIFAR_TRAIN_FILES])
        test_x, test_y = load_cifar10([_find(root, CIFAR_TEST_FILE)])
        train_x = global_contrast_normalize(train_x)
        test_x = global_contrast_normalize(test_x)
        split = split_train_val(train_x, train_y, val_fraction, seed, subset_n)
        split.test_x, split.test_y = test_x, test_y
        split.preprocessing = "gcn"
        split.augment = "pad_crop4"
        return split
    raise ValueError(f"unknown dataset {name!r}")
