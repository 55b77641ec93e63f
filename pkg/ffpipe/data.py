# ffpipe/data.py
"""
Dataset ingestion.

MNIST IDX and CIFAR-10 binary batches are parsed bit-exactly; pixels are
scaled by 1/255 and flattened row-major. Malformed files raise, they are never
silently truncated.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Sequence, Union

import numpy as np

from .exceptions import (
    CountMismatchError,
    DatasetError,
    MagicNumberError,
    PartitionError,
    TruncatedFileError,
    ValidationError,
)
from .tensor import STREAM_BLOBS, STREAM_PARTITION, derive_seed, get_rng

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
PartitionScheme = Literal['iid', 'byclass']

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_CLASSES = 10

CIFAR_CLASSES = 10
CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD = 1 + CIFAR_PIXELS


@dataclass
class Dataset:
    """Flattened images in [0, 1] with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"{self.name}: {self.images.shape} images do not match {self.labels.shape} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices: np.ndarray, name: str = None) -> 'Dataset':
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, name or self.name)

    def astype(self, dtype: np.dtype) -> 'Dataset':
        if self.images.dtype == dtype:
            return self
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.name)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Dataset file not found: {path}")
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as f:
        return f.read()


def _check_length(path: PathLike, data: bytes, expected: int) -> None:
    if len(data) != expected:
        raise TruncatedFileError(str(path), expected, len(data))


def load_mnist_idx(images_path: PathLike,
                   labels_path: PathLike,
                   dtype: np.dtype = np.float32,
                   name: str = "mnist") -> Dataset:
    """
    Parse an MNIST IDX image/label file pair.

    Args:
        images_path: IDX3 image file (optionally .gz)
        labels_path: IDX1 label file (optionally .gz)
        dtype: Pixel dtype of the result
        name: Dataset name

    Returns:
        Dataset with n x 784 pixels scaled to [0, 1]

    Raises:
        MagicNumberError: Wrong file type
        TruncatedFileError: File length disagrees with its header
        CountMismatchError: Image and label counts differ
    """
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)
    if len(raw_images) < 16:
        raise TruncatedFileError(str(images_path), 16, len(raw_images))
    if len(raw_labels) < 8:
        raise TruncatedFileError(str(labels_path), 8, len(raw_labels))

    magic, count, rows, cols = struct.unpack('>IIII', raw_images[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise MagicNumberError(str(images_path), MNIST_IMAGE_MAGIC, magic)
    _check_length(images_path, raw_images, 16 + count * rows * cols)

    label_magic, label_count = struct.unpack('>II', raw_labels[:8])
    if label_magic != MNIST_LABEL_MAGIC:
        raise MagicNumberError(str(labels_path), MNIST_LABEL_MAGIC, label_magic)
    _check_length(labels_path, raw_labels, 8 + label_count)
    if count != label_count:
        raise CountMismatchError(count, label_count)

    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= MNIST_CLASSES:
        raise DatasetError(f"{labels_path}: label {labels.max()} outside [0, {MNIST_CLASSES})")
    images = pixels.astype(dtype) / 255.0
    logger.info("Loaded %d MNIST images (%dx%d) from %s", count, rows, cols, images_path)
    return Dataset(images.astype(dtype, copy=False), labels, MNIST_CLASSES, name)


def load_cifar10(batch_paths: Sequence[PathLike],
                 dtype: np.dtype = np.float32,
                 name: str = "cifar10") -> Dataset:
    """
    Parse CIFAR-10 binary batches.

    Each record is one label byte followed by 3072 pixel bytes (R, G, B
    planes of 32x32), flattened as stored.

    Raises:
        DatasetError: Record-size misalignment or label out of range
    """
    if not batch_paths:
        raise DatasetError("No CIFAR-10 batch files given")
    images, labels = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetError(
                f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.max() >= CIFAR_CLASSES:
            raise DatasetError(f"{path}: label {batch_labels.max()} outside [0, {CIFAR_CLASSES})")
        labels.append(batch_labels)
        images.append(records[:, 1:])
        logger.info("Loaded %d CIFAR-10 records from %s", len(records), path)
    pixels = np.concatenate(images)
    return Dataset((pixels.astype(dtype) / 255.0).astype(dtype, copy=False),
                   np.concatenate(labels), CIFAR_CLASSES, name)


def partition(dataset: Dataset,
              n_parts: int,
              scheme: PartitionScheme = 'iid',
              seed: int = 0) -> List[Dataset]:
    """
    Split a dataset into disjoint parts.

    Args:
        dataset: Dataset to split
        n_parts: Number of parts (>= 1)
        scheme: 'iid' for a shuffled even split, 'byclass' for contiguous class ranges
        seed: Shuffle seed for 'iid'

    Returns:
        List of n_parts datasets whose union is the original multiset

    Raises:
        PartitionError: Too many parts or an empty part
    """
    n = len(dataset)
    if n_parts < 1 or n_parts > n:
        raise PartitionError(f"Cannot split {n} instances into {n_parts} parts")
    if scheme == 'iid':
        order = get_rng(derive_seed(seed, STREAM_PARTITION)).permutation(n)
        chunks = np.array_split(order, n_parts)
    elif scheme == 'byclass':
        if n_parts > dataset.num_classes:
            raise PartitionError(
                f"Cannot split {dataset.num_classes} classes into {n_parts} class ranges")
        ranges = np.array_split(np.arange(dataset.num_classes), n_parts)
        chunks = [np.flatnonzero(np.isin(dataset.labels, r)) for r in ranges]
    else:
        raise PartitionError(f"Unknown partition scheme: {scheme}")

    parts = []
    for i, idx in enumerate(chunks):
        if len(idx) == 0:
            raise PartitionError(f"Partition {i} of {dataset.name} is empty")
        parts.append(dataset.subset(idx, name=f"{dataset.name}[{i}/{n_parts}]"))
    return parts


def synthetic_blobs(n: int,
                    d: int,
                    num_classes: int,
                    separation: float,
                    seed: int,
                    noise: float = 0.1,
                    dtype: np.dtype = np.float64) -> Dataset:
    """
    Gaussian class blobs clipped to [0, 1].

    Class centres sit at 0.5 +/- separation * noise / 2 per dimension, so two
    classes that differ in a dimension are ``separation`` noise-deviations
    apart there. separation=0 makes the classes indistinguishable.

    Args:
        n: Number of instances (classes are balanced)
        d: Dimension, must exceed num_classes (the label region is overwritten by FF)
        num_classes: Number of classes
        separation: Centre spread in units of the noise deviation
        seed: Generator seed
        noise: Per-dimension noise deviation
        dtype: Pixel dtype
    """
    if d <= num_classes:
        raise ValidationError(f"synthetic_blobs needs d > num_classes (got d={d}, classes={num_classes})")
    rng = get_rng(derive_seed(seed, STREAM_BLOBS))
    signs = rng.choice([-1.0, 1.0], size=(num_classes, d))
    centres = 0.5 + signs * (separation * noise / 2.0)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = centres[labels] + rng.normal(0.0, noise, size=(n, d))
    return Dataset(np.clip(images, 0.0, 1.0).astype(dtype), labels, num_classes, f"blobs-{num_classes}x{d}")
