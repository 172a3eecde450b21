# File: src/fedpower/dataio.py
"""
Dataset input/output.

Reads and writes the big-endian IDX image/label format (optionally gzipped),
builds a synthetic stand-in for MNIST so everything runs offline, and splits
channel realizations into train/validation/test sets.
"""

from __future__ import annotations

import gzip
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .channel import ChannelRealization
from .config import NUM_CLASSES
from .diffcore import FloatArray
from .errors import ConfigError, ConsistencyError, FormatError, LabelError, LengthError

__all__ = [
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "MNIST_FILES",
    "LabeledDataset",
    "DatasetSplits",
    "read_idx",
    "write_idx",
    "load_mnist",
    "synth_dataset",
    "split_channels",
    "subsample",
]

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Standard corpus file names, (images, labels) per split.
MNIST_FILES: dict[str, tuple[str, str]] = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class LabeledDataset:
    """``inputs`` is (n, d) in [0, 1]; ``labels`` is (n,) in [0, NUM_CLASSES)."""

    inputs: FloatArray
    labels: NDArray[np.int64]

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ConsistencyError(
                f"expected (n, d) inputs and (n,) labels, got "
                f"{self.inputs.shape} and {self.labels.shape}"
            )
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES
        ):
            raise LabelError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.inputs.shape[1])

    def take(self, indices: ArrayLike) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class DatasetSplits:
    train: list[ChannelRealization]
    val: list[ChannelRealization]
    test: list[ChannelRealization]


def _read_bytes(path: Path | str) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_images(data: bytes, path: Path | str) -> NDArray[np.uint8]:
    if len(data) < 16:
        raise LengthError(f"{path}: truncated image header")
    magic = _U32.unpack_from(data, 0)[0]
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: image magic is 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    count, rows, cols = struct.unpack_from(">III", data, 4)
    size = count * rows * cols
    if len(data) < 16 + size:
        raise LengthError(f"{path}: {count} images announced, {len(data) - 16} bytes present")
    pixels = np.frombuffer(data, dtype=np.uint8, count=size, offset=16)
    return pixels.reshape(count, rows * cols)


def _parse_labels(data: bytes, path: Path | str) -> NDArray[np.uint8]:
    if len(data) < 8:
        raise LengthError(f"{path}: truncated label header")
    magic = _U32.unpack_from(data, 0)[0]
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: label magic is 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    count = _U32.unpack_from(data, 4)[0]
    if len(data) < 8 + count:
        raise LengthError(f"{path}: {count} labels announced, {len(data) - 8} bytes present")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8)


def read_idx(path_images: Path | str, path_labels: Path | str) -> LabeledDataset:
    """Parse an IDX image/label file pair; pixels are scaled by 1/255.

    Files ending in ``.gz`` are decompressed transparently.

    Raises:
        FormatError: If a magic number is wrong (the message names it).
        ConsistencyError: If image and label counts differ.
        LengthError: If a payload is shorter than its header announces.
    """
    pixels = _parse_images(_read_bytes(path_images), path_images)
    labels = _parse_labels(_read_bytes(path_labels), path_labels)
    if pixels.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{path_images} holds {pixels.shape[0]} images but "
            f"{path_labels} holds {labels.shape[0]} labels"
        )
    logger.info("read %d samples from %s", labels.shape[0], path_images)
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(
    dataset: LabeledDataset,
    path_images: Path | str,
    path_labels: Path | str,
    shape: tuple[int, int] | None = None,
) -> None:
    """Write ``dataset`` as an IDX pair; inputs are rounded to bytes.

    ``shape`` gives (rows, cols) of each image; square images are assumed
    when omitted.
    """
    n, d = dataset.inputs.shape
    if shape is None:
        side = int(round(d**0.5))
        if side * side != d:
            raise ConfigError(f"cannot infer an image shape for {d} features")
        shape = (side, side)
    rows, cols = shape
    if rows * cols != d:
        raise ConfigError(f"image shape {shape} does not hold {d} features")
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    image_bytes = struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(
        np.uint8
    ).tobytes()
    for path, payload in ((path_images, image_bytes), (path_labels, label_bytes)):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".gz":
            with gzip.open(path, "wb") as f:
                f.write(payload)
        else:
            path.write_bytes(payload)


def load_mnist(directory: Path | str, split: str = "train") -> LabeledDataset:
    """Load one split of the corpus from its standard file names.

    Both the plain and the ``.gz`` file names are looked up.
    """
    if split not in MNIST_FILES:
        raise ConfigError(f"unknown MNIST split {split!r}")
    directory = Path(directory)
    found: list[Path] = []
    for name in MNIST_FILES[split]:
        candidates = [directory / name, directory / f"{name}.gz"]
        hit = next((c for c in candidates if c.exists()), None)
        if hit is None:
            raise ConfigError(f"MNIST file {name} not found in {directory}")
        found.append(hit)
    return read_idx(found[0], found[1])


def synth_dataset(n: int, seed: int, num_features: int = 784) -> LabeledDataset:
    """Gaussian class prototypes plus noise, stored at byte resolution.

    Labels are balanced within one sample per class. Values are clipped to
    [0, 1] and quantized to multiples of 1/255 so the dataset survives an IDX
    round trip unchanged.
    """
    if n < NUM_CLASSES:
        raise ConfigError(f"synthetic dataset needs at least {NUM_CLASSES} samples")
    rng = np.random.default_rng([seed, 0xDA7A])
    prototypes = np.clip(0.5 + 0.25 * rng.standard_normal((NUM_CLASSES, num_features)), 0, 1)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.int64)
    noisy = prototypes[labels] + 0.2 * rng.standard_normal((n, num_features))
    inputs = np.rint(np.clip(noisy, 0.0, 1.0) * 255.0) / 255.0
    return LabeledDataset(inputs, labels)


def split_channels(
    realizations: Sequence[ChannelRealization],
    seed: int,
    counts: tuple[int, int, int] = (1000, 1000, 1000),
) -> DatasetSplits:
    """Seeded shuffle followed by contiguous train/val/test slices.

    Raises:
        ConfigError: If the number of realizations differs from sum(counts).
    """
    total = sum(counts)
    if len(realizations) != total:
        raise ConfigError(
            f"expected {total} channel realizations for splits {counts}, "
            f"got {len(realizations)}"
        )
    order = np.random.default_rng([seed, 0x5B17]).permutation(total)
    shuffled = [realizations[i] for i in order]
    n_train, n_val, _ = counts
    return DatasetSplits(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


def subsample(dataset: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """``n`` samples drawn without replacement; the whole set if it is smaller."""
    if n >= len(dataset):
        return dataset
    rng = np.random.default_rng([seed, 0x7E57])
    return dataset.take(np.sort(rng.choice(len(dataset), size=n, replace=False)))
