"""Dataset container, synthetic generators, and the IDX file reader."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # float32, (N, ...)
    labels: np.ndarray  # int64, (N,)
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} samples"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.features.shape[0]


def _generator(seed: int) -> np.random.Generator:
    # Philox is counter-based, so streams are identical across platforms.
    return np.random.Generator(np.random.Philox(key=seed & (2**128 - 1)))


def gen_synthetic(kind: str, n: int, seed: int) -> Dataset:
    """Deterministic 2-D toy datasets.

    ``blobs``: two isotropic Gaussians with centers (-2, 0) and (+2, 0) and
    standard deviation 0.5, i.e. each class center sits four standard
    deviations from the midpoint decision boundary.  ``xor``: uniform
    points in [-1, 1]^2 labelled by the XOR of the coordinate signs.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = _generator(seed)
    if kind == "blobs":
        n0 = n // 2
        labels = np.concatenate(
            [np.zeros(n0, np.int64), np.ones(n - n0, np.int64)]
        )
        centers = np.array([[-2.0, 0.0], [2.0, 0.0]])
        noise = rng.normal(0.0, 0.5, size=(n, 2))
        feats = (centers[labels] + noise).astype(np.float32)
        return Dataset(feats, labels, split="train")
    if kind == "xor":
        feats = rng.uniform(-1.0, 1.0, size=(n, 2)).astype(np.float32)
        labels = ((feats[:, 0] > 0) ^ (feats[:, 1] > 0)).astype(np.int64)
        return Dataset(feats, labels, split="train")
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"IDX file truncated while reading {what}")
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair (big-endian headers, ubyte payloads).

    Pixels are scaled to [0, 1]; features come out as (N, 1, rows, cols).
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(
                f"bad IDX image magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
            )
        raw = _read_exact(f, count * rows * cols, "image pixels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    features = pixels.astype(np.float32) / np.float32(255.0)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(
                f"bad IDX label magic: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
            )
        raw = _read_exact(f, label_count, "labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise ValueError(
            f"IDX count mismatch: {count} images but {label_count} labels"
        )
    return Dataset(features, labels, split="train")
