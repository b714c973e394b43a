"""CIFAR-10 binary loading, per-channel normalization and a synthetic image set."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

PathLike = Union[str, os.PathLike]


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images (N x C x H x W, float32 in [0, 1]) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("images and labels differ in length")
        if self.channel_mean is None:
            self.channel_mean, self.channel_std = channel_stats(self.images)
        self.channel_mean = np.asarray(self.channel_mean, dtype=np.float32)
        self.channel_std = np.asarray(self.channel_std, dtype=np.float32)
        if (self.channel_std <= 0).any():
            raise DatasetError(f"channel std must be positive, got {self.channel_std}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.channel_mean, self.channel_std)

    def with_stats(self, mean, std) -> "Dataset":
        return Dataset(self.images, self.labels, mean, std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    # a flat channel would divide by zero; fall back to unit scale
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def decode_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD_BYTES:
        raise DatasetError(f"truncated CIFAR-10 data: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"invalid label {labels[bad[0]]} in record {bad[0]}")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255.0
    return images, labels


def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`decode_records` for images on the 1/255 grid."""
    pix = np.rint(np.clip(images, 0, 1) * 255.0).astype(np.uint8).reshape(len(labels), -1)
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = pix
    return out.tobytes()


def load_cifar10_bin(path: Union[PathLike, Sequence[PathLike]]) -> Dataset:
    """Parse one or more CIFAR-10 binary batch files."""
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    images, labels = [], []
    for p in paths:
        img, lab = decode_records(Path(p).read_bytes())
        images.append(img)
        labels.append(lab)
    return Dataset(np.concatenate(images), np.concatenate(labels))


def load_cifar10_dir(root: PathLike, split: str = "train") -> Dataset:
    root = Path(root)
    names = TRAIN_FILES if split == "train" else (TEST_FILE,)
    missing = [n for n in names if not (root / n).is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {root}: {', '.join(missing)}")
    return load_cifar10_bin([root / n for n in names])


def normalize(ds: Dataset, image: np.ndarray) -> np.ndarray:
    """(pixel - mean_c) / std_c for a C x H x W image or an N x C x H x W batch."""
    shape = (-1, 1, 1) if image.ndim == 3 else (1, -1, 1, 1)
    return ((image - ds.channel_mean.reshape(shape)) / ds.channel_std.reshape(shape)).astype(np.float32)


def synthetic_dataset(n: int, n_classes: int = 10, seed: int = 0, size: int = 32) -> Dataset:
    """Images whose class is encoded as an oriented colour grating plus noise.

    Labels cycle 0, 1, ..., n_classes - 1. Each class gets its own orientation,
    spatial frequency and colour mix; the phase and additive noise are drawn
    from ``seed``.
    """
    if n < 1 or n_classes < 1:
        raise ValueError("n and n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % n_classes
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    golden = (np.sqrt(5) - 1) / 2
    for i, c in enumerate(labels):
        theta = np.pi * c / n_classes
        freq = 2 * np.pi * (1 + (c % 3)) / 8
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        hue = (c * golden) % 1.0
        colour = 0.5 + 0.4 * np.cos(2 * np.pi * (hue + np.array([0, 1 / 3, 2 / 3])))
        img = 0.5 + 0.35 * wave[None] * colour[:, None, None]
        img += rng.normal(0, 0.05, size=img.shape)
        images[i] = np.clip(img, 0, 1)
    return Dataset(images, labels)
