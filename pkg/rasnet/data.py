"""
Dataset ingestion for CIFAR-10/100 binary files, a synthetic class-blob
dataset for desk-scale runs, normalization and train-time augmentation.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .errors import ConfigurationError, CorruptDatasetError
from .tensor import Tensor, resolve_dtype

logger = logging.getLogger(__name__)

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE

# Canonical file sets and split sizes
CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}
CIFAR_SPLIT_SIZES = {
    ("cifar10", "train"): 50_000,
    ("cifar10", "test"): 10_000,
    ("cifar100", "train"): 50_000,
    ("cifar100", "test"): 10_000,
}


class CifarVariant(str, Enum):
    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"

    @property
    def label_bytes(self) -> int:
        return 1 if self is CifarVariant.CIFAR10 else 2

    @property
    def record_bytes(self) -> int:
        return self.label_bytes + CIFAR_PIXELS

    @property
    def num_classes(self) -> int:
        return 10 if self is CifarVariant.CIFAR10 else 100


@dataclass
class Example:
    """One image in [0, 1], channel-planar [3, H, W], and its class index."""
    image: np.ndarray
    label: int

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


class DatasetMeta(BaseModel):
    """Normalization constants and identity of a dataset."""
    name: str
    num_classes: int = Field(ge=1)
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    layout: str = "chw-f32"

    @field_validator("std")
    @classmethod
    def _std_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"std entries must be strictly positive, got {v}")
        return v

    def mean_array(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=np.float64).reshape(1, 3, 1, 1)

    def std_array(self) -> np.ndarray:
        return np.asarray(self.std, dtype=np.float64).reshape(1, 3, 1, 1)


# CIFAR binary layout

def _variant(variant: Union[str, CifarVariant]) -> CifarVariant:
    try:
        return CifarVariant(variant)
    except ValueError as exc:
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}; expected cifar10 or cifar100") from exc


def read_cifar_file(
    path: Union[str, Path],
    variant: Union[str, CifarVariant] = CifarVariant.CIFAR10,
    expected_records: Optional[int] = None,
) -> List[Example]:
    """
    Decode one CIFAR binary file.

    cifar10 records are 1 label byte + 3072 pixel bytes; cifar100 records carry
    a coarse and a fine label byte first and the fine label is used.
    """
    variant = _variant(variant)
    path = Path(path)
    raw = path.read_bytes()
    record = variant.record_bytes
    if expected_records is not None and len(raw) != expected_records * record:
        raise CorruptDatasetError(str(path), expected_records * record, len(raw), f"{expected_records} records of {record} bytes")
    if len(raw) == 0 or len(raw) % record != 0:
        expected = (len(raw) // record + 1) * record
        raise CorruptDatasetError(str(path), expected, len(raw), f"not a whole number of {record}-byte records")

    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = table[:, variant.label_bytes - 1].astype(np.int64)
    pixels = table[:, variant.label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    if labels.max(initial=0) >= variant.num_classes:
        raise CorruptDatasetError(str(path), len(raw), len(raw), f"label {labels.max()} out of range for {variant.value}")
    return [Example(image=pixels[i], label=int(labels[i])) for i in range(len(labels))]


def write_cifar_file(
    path: Union[str, Path],
    images: np.ndarray,
    labels: Sequence[int],
    variant: Union[str, CifarVariant] = CifarVariant.CIFAR10,
    coarse_labels: Optional[Sequence[int]] = None,
) -> Path:
    """Encode uint8 [N,3,32,32] images and labels in CIFAR binary layout."""
    variant = _variant(variant)
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE) or len(images) != len(labels):
        raise ConfigurationError(f"need [N,3,32,32] images and N labels, got {images.shape} and {labels.shape}")
    columns = [labels.reshape(-1, 1)]
    if variant is CifarVariant.CIFAR100:
        coarse = np.zeros_like(labels) if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
        columns.insert(0, coarse.reshape(-1, 1))
    columns.append(images.reshape(len(images), -1))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.concatenate(columns, axis=1).tobytes())
    return path


def cifar_files(data_dir: Union[str, Path], variant: Union[str, CifarVariant], split: str) -> List[Path]:
    variant = _variant(variant)
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    data_dir = Path(data_dir)
    root = data_dir / CIFAR_SUBDIRS[variant.value]
    if not root.is_dir():
        root = data_dir
    return [root / name for name in CIFAR_FILES[(variant.value, split)]]


def load_cifar(
    data_dir: Union[str, Path],
    variant: Union[str, CifarVariant] = CifarVariant.CIFAR10,
    split: str = "train",
    strict: bool = True,
) -> List[Example]:
    """
    Load a full CIFAR split from the standard binary files.

    With ``strict`` every file must hold exactly its share of the canonical
    split size; the loader never truncates.
    """
    variant = _variant(variant)
    files = cifar_files(data_dir, variant, split)
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise ConfigurationError(f"missing {variant.value} {split} files: {', '.join(missing)}")

    total = CIFAR_SPLIT_SIZES[(variant.value, split)]
    per_file = total // len(files) if strict else None
    examples: List[Example] = []
    for f in files:
        examples.extend(read_cifar_file(f, variant, expected_records=per_file))
    if strict and len(examples) != total:
        raise CorruptDatasetError(
            str(files[0].parent), total * variant.record_bytes, len(examples) * variant.record_bytes, f"{split} split"
        )
    logger.info("loaded %d %s %s examples", len(examples), variant.value, split)
    return examples


# Synthetic data

def _class_codes(num_classes: int) -> np.ndarray:
    """Distinct unit-norm RGB directions, one per class."""
    if num_classes <= 8:
        vertices = np.array([[(i >> b) & 1 for b in range(3)] for i in range(8)], dtype=np.float64) * 2 - 1
        # alternate opposite corners first so two classes are antipodal
        order = [0, 7, 3, 4, 5, 2, 6, 1]
        codes = vertices[order[:num_classes]]
    else:
        index = np.arange(num_classes) + 0.5
        phi = np.arccos(1 - 2 * index / num_classes)
        theta = np.pi * (1 + 5 ** 0.5) * index
        codes = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


def synth_dataset(
    num_classes: int = 2,
    count: int = 64,
    resolution: Union[int, Tuple[int, int]] = 16,
    seed: int = 0,
    amplitude: float = 0.35,
    noise: float = 0.05,
) -> List[Example]:
    """
    Class-conditional Gaussian-blob images.

    Every image is mid-grey plus a centred Gaussian blob whose colour is the
    class code, plus bounded uniform noise. The per-channel spatial mean of an
    image is therefore its class code times a fixed positive constant up to
    noise much smaller than the code separation, so classes are linearly
    separable after global average pooling. Labels are balanced.
    """
    if count < num_classes:
        raise ConfigurationError(f"count ({count}) must be >= num_classes ({num_classes})")
    if num_classes < 2:
        raise ConfigurationError("a synthetic dataset needs at least two classes")
    h, w = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = 0.25 * min(h, w)
    blob = np.exp(-((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (2 * sigma ** 2))
    codes = _class_codes(num_classes)

    labels = rng.permutation(np.arange(count) % num_classes)
    examples = []
    for label in labels:
        image = 0.5 + amplitude * codes[label].reshape(3, 1, 1) * blob
        image = image + rng.uniform(-noise, noise, size=(3, h, w))
        examples.append(Example(image=np.clip(image, 0.0, 1.0).astype(np.float32), label=int(label)))
    return examples


# Normalization, augmentation, batching

def compute_meta(data: Sequence[Example], name: str, num_classes: int, layout: str = "chw-f32") -> DatasetMeta:
    """Per-channel mean/std of a training split."""
    if not data:
        raise ConfigurationError("cannot compute normalization constants of an empty dataset")
    stack = np.stack([ex.image for ex in data]).astype(np.float64)
    mean = stack.mean(axis=(0, 2, 3))
    std = np.maximum(stack.std(axis=(0, 2, 3)), 1e-6)
    return DatasetMeta(name=name, num_classes=num_classes, mean=tuple(mean), std=tuple(std), layout=layout)


def augment(ex: Example, rng: np.random.Generator, pad: int = 4) -> Example:
    """Zero-pad ``pad`` pixels, take a random crop of the original size, flip horizontally with p=0.5."""
    _, h, w = ex.image.shape
    padded = np.pad(ex.image, ((0, 0), (pad, pad), (pad, pad)))
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    image = padded[:, top:top + h, left:left + w]
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
    return Example(image=np.ascontiguousarray(image), label=ex.label)


def normalize(images: np.ndarray, meta: Optional[DatasetMeta]) -> np.ndarray:
    if meta is None:
        return images
    return (images - meta.mean_array()) / meta.std_array()


def denormalize(images: Union[Tensor, np.ndarray], meta: DatasetMeta) -> np.ndarray:
    """Inverse of batch normalization-by-constants: recovers [0, 1] pixels."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    return data.astype(np.float64) * meta.std_array() + meta.mean_array()


def batches(
    data: Sequence[Example],
    batch_size: int,
    shuffle_seed: Optional[int] = 0,
    meta: Optional[DatasetMeta] = None,
    epoch: int = 0,
    augment_rng: Optional[np.random.Generator] = None,
    dtype=None,
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """
    Yield (images [N,3,H,W], labels [N]) batches; the last partial batch is kept.

    The order is a pure function of (shuffle_seed, epoch); ``shuffle_seed=None``
    keeps dataset order. Augmentation is applied only when ``augment_rng`` is
    given, i.e. on the training split.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if len(data) == 0:
        raise ConfigurationError("cannot batch an empty dataset")
    dtype = resolve_dtype(dtype)
    order = np.arange(len(data))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(data))

    for start in range(0, len(order), batch_size):
        chunk = [data[i] for i in order[start:start + batch_size]]
        if augment_rng is not None:
            chunk = [augment(ex, augment_rng) for ex in chunk]
        images = normalize(np.stack([ex.image for ex in chunk]).astype(np.float64), meta)
        labels = np.array([ex.label for ex in chunk], dtype=np.int64)
        yield Tensor(images, dtype=dtype), labels
