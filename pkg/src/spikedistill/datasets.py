"""MNIST-IDX and CIFAR-10-binary readers, subsetting and batching.

Raw bytes ``p`` are mapped affinely to ``p / 127.5 - 1`` so pixels lie in
[-1, 1]; ``round((x + 1) * 127.5)`` recovers the original byte. Files whose
first two bytes are the gzip magic are decompressed transparently.
"""
from __future__ import annotations

import gzip
import pathlib
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .tensor import DTYPE, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DatasetError(ValueError):
    pass


class LabeledImage(NamedTuple):
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Immutable image/label arrays. Indexing yields :class:`LabeledImage`."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices].copy(), self.labels[indices].copy(), self.num_classes)


@dataclass
class DatasetSpec:
    name: str
    num_classes: int
    image_shape: tuple
    train_paths: Sequence[str] = field(default_factory=list)
    test_paths: Sequence[str] = field(default_factory=list)
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    subset_seed: int = 0


def normalize_bytes(raw):
    return (raw.astype(DTYPE) / DTYPE(127.5) - DTYPE(1.0)).astype(DTYPE)


def denormalize(x):
    return np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5).astype(np.uint8)


def _read_bytes(path):
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, expected_magic, path):
    if len(data) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise DatasetError(f"{path}: truncated IDX body, need {size} bytes, have {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims), count


def load_idx(images_path, labels_path, num_classes=10):
    """Load an MNIST-style IDX image/label file pair into a :class:`Dataset`."""
    images, n_images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels, n_labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if n_images != n_labels:
        raise DatasetError(f"count mismatch: {n_images} images vs {n_labels} labels")
    labels = labels.astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} out of range for {num_classes} classes")
    pixels = normalize_bytes(images)[:, None, :, :]
    return Dataset(np.ascontiguousarray(pixels), labels, num_classes)


def write_idx(path, array):
    """Write a uint8 array as IDX (gzipped when ``path`` ends in ``.gz``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    path = pathlib.Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_cifar10(batch_paths, num_classes=10):
    """Load CIFAR-10 binary batches: 1 label byte then 1024 R, 1024 G, 1024 B bytes."""
    if isinstance(batch_paths, (str, pathlib.Path)):
        batch_paths = [batch_paths]
    chunks = []
    for path in batch_paths:
        data = _read_bytes(path)
        if len(data) % CIFAR_RECORD:
            raise DatasetError(
                f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}-byte records"
            )
        chunks.append(np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} out of range for {num_classes} classes")
    pixels = normalize_bytes(records[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.ascontiguousarray(pixels), labels, num_classes)


def write_cifar10(path, raw_images, labels):
    raw_images = np.asarray(raw_images, dtype=np.uint8).reshape(len(labels), 3072)
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None], raw_images], axis=1)
    pathlib.Path(path).write_bytes(records.tobytes())


def subset(dataset, size, seed):
    """Deterministic sample of ``size`` items (order fixed by ``seed``)."""
    if size is None or size >= len(dataset):
        return dataset
    idx = np.sort(make_rng(seed).permutation(len(dataset))[:size])
    return dataset.take(idx)


def load_dataset(spec):
    """Return ``(train, test)`` for a :class:`DatasetSpec`."""
    name = spec.name.lower()
    if name == "mnist":
        if len(spec.train_paths) != 2 or len(spec.test_paths) != 2:
            raise DatasetError("mnist needs (images, labels) paths for train and test")
        train = load_idx(*spec.train_paths, num_classes=spec.num_classes)
        test = load_idx(*spec.test_paths, num_classes=spec.num_classes)
    elif name == "cifar10":
        train = load_cifar10(spec.train_paths, spec.num_classes)
        test = load_cifar10(spec.test_paths, spec.num_classes)
    else:
        raise DatasetError(f"unknown dataset {spec.name!r}")
    for split in (train, test):
        if split.image_shape != tuple(spec.image_shape):
            raise DatasetError(f"image shape {split.image_shape} != declared {tuple(spec.image_shape)}")
    train = subset(train, spec.train_subset, spec.subset_seed)
    test = subset(test, spec.test_subset, spec.subset_seed + 1)
    return train, test


def batch_iter(dataset, batch_size, shuffle_seed=None, epoch=0):
    """Yield ``(images, labels)`` batches; the last partial batch is kept.

    With a ``shuffle_seed`` the order is a permutation drawn from the stream
    keyed by ``(shuffle_seed, epoch)``; with ``None`` the natural order is used.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise DatasetError("cannot batch an empty dataset")
    order = np.arange(n) if shuffle_seed is None else make_rng(shuffle_seed, epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
