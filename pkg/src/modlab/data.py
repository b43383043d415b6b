"""
Dataset ingestion: CIFAR-10 binary files and a seeded synthetic task.

The synthetic task places a class-dependent Gaussian blob on a grid plus
pixel noise; it is linearly separable enough that a tiny model reaches high
train accuracy in a few epochs, and generation is a pure function of the
spec's seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes, planar RGB
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class FormatError(ValueError):
    """Input file does not follow the expected binary layout."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # "cifar10_binary" | "synthetic"
    path: str | None = None
    num_classes: int = 4
    samples: int = 256
    image_size: int = 16
    seed: int = 0
    noise_std: float = 0.25
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.kind not in ("cifar10_binary", "synthetic"):
            raise FormatError(f"unknown dataset kind {self.kind!r}")

    def shifted_seed(self, offset: int) -> "DatasetSpec":
        """Same distribution, disjoint draw; handy for held-out splits."""
        return replace(self, seed=self.seed + offset)


@dataclass
class Dataset:
    images: np.ndarray  # (M, C, H, W) float32
    labels: np.ndarray  # (M,) int64
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


def load_cifar10_binary(
    path: str,
    mean: tuple[float, ...] = CIFAR_MEAN,
    std: tuple[float, ...] = CIFAR_STD,
) -> Dataset:
    """Read a CIFAR-10 binary batch file: 3073-byte records, planar RGB rows."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        raise FormatError(f"{path}: label byte >= 10 encountered")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return Dataset(images=(images - m) / s, labels=labels, num_classes=10)


def _blob_centers(num_classes: int, image_size: int) -> np.ndarray:
    grid = math.ceil(math.sqrt(num_classes))
    centers = []
    for c in range(num_classes):
        row, col = divmod(c, grid)
        centers.append(((row + 0.5) / grid * image_size, (col + 0.5) / grid * image_size))
    return np.asarray(centers, dtype=np.float32)


def synth_dataset(spec: DatasetSpec) -> Dataset:
    """Single-channel images: one bright blob at a class-determined spot plus noise."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    centers = _blob_centers(spec.num_classes, size)
    sigma = size / (2.5 * math.ceil(math.sqrt(spec.num_classes)))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    labels = np.arange(spec.samples, dtype=np.int64) % spec.num_classes
    images = np.empty((spec.samples, 1, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        cy, cx = centers[label]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        noise = rng.normal(0.0, spec.noise_std, size=(size, size)) if spec.noise_std > 0 else 0.0
        images[i, 0] = 2.0 * blob + noise
    m = np.asarray(spec.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(spec.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return Dataset(images=(images - m) / s, labels=labels, num_classes=spec.num_classes)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "cifar10_binary":
        if not spec.path:
            raise FormatError("cifar10_binary spec requires a path")
        return load_cifar10_binary(spec.path, mean=spec.mean, std=spec.std)
    return synth_dataset(spec)
