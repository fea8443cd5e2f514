"""
Tests for CIFAR decoding, the synthetic dataset, augmentation and batching.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from rasnet import data as data_module
from rasnet.data import (
    DatasetMeta,
    Example,
    augment,
    batches,
    compute_meta,
    denormalize,
    load_cifar,
    read_cifar_file,
    synth_dataset,
    write_cifar_file,
)
from rasnet.errors import ConfigurationError, CorruptDatasetError


def random_images(count, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(count, 3, 32, 32), dtype=np.uint8)


class ScriptedRng:
    """Stand-in generator returning fixed crop offsets and flip draws."""

    def __init__(self, offsets, flip_draw):
        self._offsets = list(offsets)
        self._flip_draw = flip_draw

    def integers(self, low, high):
        return self._offsets.pop(0)

    def random(self):
        return self._flip_draw


def test_single_record_decodes(tmp_path):
    """Test one cifar10 record: label byte 7 and an all-255 image."""
    path = tmp_path / "one.bin"
    path.write_bytes(bytes([7]) + bytes([255]) * 3072)
    (ex,) = read_cifar_file(path, "cifar10")
    assert ex.label == 7
    assert ex.image.shape == (3, 32, 32)
    assert ex.image.dtype == np.float32
    np.testing.assert_array_equal(ex.image, 1.0)


@pytest.mark.parametrize("variant,max_label", [("cifar10", 10), ("cifar100", 100)])
def test_write_then_read(tmp_path, variant, max_label):
    """Test 100 records come back with their labels and pixels / 255."""
    images = random_images(100)
    labels = np.random.default_rng(1).integers(0, max_label, size=100)
    path = write_cifar_file(tmp_path / "batch.bin", images, labels, variant)
    examples = read_cifar_file(path, variant, expected_records=100)
    assert [ex.label for ex in examples] == labels.tolist()
    np.testing.assert_allclose(examples[42].image, images[42] / 255.0, rtol=1e-6)


def test_cifar100_uses_fine_label(tmp_path):
    """Test the second label byte is the class."""
    path = write_cifar_file(tmp_path / "b.bin", random_images(2), [55, 3], "cifar100", coarse_labels=[9, 19])
    assert [ex.label for ex in read_cifar_file(path, "cifar100")] == [55, 3]


def test_corrupt_size_reports_bytes(tmp_path):
    """Test a file of two records plus five bytes is refused with both sizes."""
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(2 * 3073 + 5))
    with pytest.raises(CorruptDatasetError) as excinfo:
        read_cifar_file(path, "cifar10")
    assert excinfo.value.actual_bytes == 6151
    assert excinfo.value.expected_bytes == 9219


def test_expected_record_count_is_enforced(tmp_path):
    """Test a whole-record file with the wrong count is still corrupt."""
    path = write_cifar_file(tmp_path / "b.bin", random_images(3), [0, 1, 2])
    with pytest.raises(CorruptDatasetError):
        read_cifar_file(path, "cifar10", expected_records=4)


def test_out_of_range_label(tmp_path):
    """Test a cifar10 label of 12 is corrupt data."""
    path = tmp_path / "b.bin"
    path.write_bytes(bytes([12]) + bytes(3072))
    with pytest.raises(CorruptDatasetError):
        read_cifar_file(path, "cifar10")


def test_load_cifar_split(tmp_path, monkeypatch):
    """Test a full (shrunken) cifar10 split loads from the standard subdirectory."""
    monkeypatch.setitem(data_module.CIFAR_SPLIT_SIZES, ("cifar10", "train"), 10)
    root = tmp_path / "cifar-10-batches-bin"
    for i in range(1, 6):
        write_cifar_file(root / f"data_batch_{i}.bin", random_images(2, seed=i), [i, i])
    examples = load_cifar(tmp_path, "cifar10", "train")
    assert len(examples) == 10
    assert [ex.label for ex in examples[:4]] == [1, 1, 2, 2]

    # one short file breaks the strict load
    write_cifar_file(root / "data_batch_3.bin", random_images(1), [3])
    with pytest.raises(CorruptDatasetError):
        load_cifar(tmp_path, "cifar10", "train")


def test_load_cifar_missing_files(tmp_path):
    """Test absent files are a configuration error naming the split."""
    with pytest.raises(ConfigurationError, match="test"):
        load_cifar(tmp_path, "cifar100", "test")
    with pytest.raises(ConfigurationError):
        load_cifar(tmp_path, "svhn", "test")


def test_synth_dataset_is_deterministic_and_balanced():
    """Test the same seed gives the same data with balanced labels."""
    a = synth_dataset(num_classes=3, count=60, resolution=8, seed=5)
    b = synth_dataset(num_classes=3, count=60, resolution=8, seed=5)
    assert [ex.label for ex in a] == [ex.label for ex in b]
    np.testing.assert_array_equal(a[0].image, b[0].image)
    assert np.bincount([ex.label for ex in a]).tolist() == [20, 20, 20]
    assert all(ex.resolution == (8, 8) for ex in a)
    assert all(0.0 <= ex.image.min() and ex.image.max() <= 1.0 for ex in a)
    assert all(ex.image.dtype == np.float32 for ex in a)


def test_synth_dataset_is_separable_after_pooling():
    """Test a nearest-centroid rule on pooled channel means classifies every example."""
    examples = synth_dataset(num_classes=4, count=80, resolution=16, seed=2)
    pooled = np.stack([ex.image.mean(axis=(1, 2)) for ex in examples])
    labels = np.array([ex.label for ex in examples])
    centroids = np.stack([pooled[labels == k].mean(axis=0) for k in range(4)])
    distances = ((pooled[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert (distances.argmin(axis=1) == labels).all()


def test_synth_dataset_validation():
    """Test too few examples or classes are configuration errors."""
    with pytest.raises(ConfigurationError):
        synth_dataset(num_classes=5, count=3)
    with pytest.raises(ConfigurationError):
        synth_dataset(num_classes=1, count=10)


def test_augment_crop_and_flip():
    """Test the centred crop without flip is the identity and offsets shift the image."""
    image = np.arange(3 * 6 * 6, dtype=np.float32).reshape(3, 6, 6)
    ex = Example(image=image, label=1)

    same = augment(ex, ScriptedRng([4, 4], flip_draw=0.9))
    np.testing.assert_array_equal(same.image, image)
    assert same.label == 1

    flipped = augment(ex, ScriptedRng([4, 4], flip_draw=0.1))
    np.testing.assert_array_equal(flipped.image, image[:, :, ::-1])

    shifted = augment(ex, ScriptedRng([0, 8], flip_draw=0.9))
    # window starts 4 rows above and 4 columns right of the original
    np.testing.assert_array_equal(shifted.image[:, 4:, :2], image[:, :2, 4:])
    np.testing.assert_array_equal(shifted.image[:, :4, :], 0.0)


def test_batches_sizes_and_determinism():
    """Test 100 examples in batches of 32 and order as a function of seed and epoch."""
    examples = synth_dataset(num_classes=2, count=100, resolution=4, seed=0)
    sizes = [len(labels) for _, labels in batches(examples, 32)]
    assert sizes == [32, 32, 32, 4]

    first = np.concatenate([labels for _, labels in batches(examples, 32, shuffle_seed=3, epoch=1)])
    again = np.concatenate([labels for _, labels in batches(examples, 32, shuffle_seed=3, epoch=1)])
    np.testing.assert_array_equal(first, again)

    ordered = np.concatenate([labels for _, labels in batches(examples, 32, shuffle_seed=None)])
    assert ordered.tolist() == [ex.label for ex in examples]

    images, _ = next(batches(examples, 8, dtype=np.float64))
    assert images.shape == (8, 3, 4, 4) and images.dtype == np.float64


def test_batches_rejects_empty_and_zero_size():
    """Test empty datasets and non-positive batch sizes."""
    with pytest.raises(ConfigurationError):
        next(batches([], 4))
    with pytest.raises(ConfigurationError):
        next(batches(synth_dataset(count=4), 0))


def test_normalization_round_trip():
    """Test denormalize recovers pixels from a normalized batch."""
    examples = synth_dataset(num_classes=2, count=16, resolution=8, seed=1)
    meta = compute_meta(examples, "synth", 2)
    images, _ = next(batches(examples, 16, shuffle_seed=None, meta=meta, dtype=np.float64))
    np.testing.assert_allclose(images.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    recovered = denormalize(images, meta)
    np.testing.assert_allclose(recovered, np.stack([ex.image for ex in examples]), atol=1e-6)


def test_dataset_meta_validation():
    """Test std entries must be positive."""
    with pytest.raises(ValidationError):
        DatasetMeta(name="x", num_classes=2, mean=(0.5, 0.5, 0.5), std=(0.2, 0.0, 0.2))
