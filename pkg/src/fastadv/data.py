"""Datasets in raw [0, 1] pixel space: CIFAR-10 binary reader and a synthetic generator.

No normalization happens here so that an l-inf budget like 8/255 keeps its
pixel meaning; models that want normalization do it in their first layer.
"""

import os
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, InputError

CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_PER_FILE = 10000
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: torch.Tensor  # float32, N x C x H x W, values in [0, 1]
    labels: torch.Tensor  # int64, N
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InputError("images and labels differ in length")

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        indices = torch.as_tensor(indices, dtype=torch.long)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, split or self.split)


@dataclass
class DataSplits:
    train: Dataset
    validation: Optional[Dataset]
    test: Optional[Dataset]


def _read_cifar_file(path: str) -> Tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != CIFAR10_RECORD * CIFAR10_PER_FILE:
        raise FormatError(
            f"{path}: expected {CIFAR10_RECORD * CIFAR10_PER_FILE} bytes "
            f"({CIFAR10_PER_FILE} records of {CIFAR10_RECORD}), found {raw.size}"
        )
    records = raw.reshape(CIFAR10_PER_FILE, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {int(labels.max())} outside 0..9")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def find_cifar10(path: str) -> Optional[str]:
    """Return the directory holding the binary batches, accepting the extracted tarball layout too."""
    for candidate in (path, os.path.join(path, "cifar-10-batches-bin")):
        if os.path.isfile(os.path.join(candidate, CIFAR10_TEST_FILE)):
            return candidate
    return None


def load_cifar10(path: str) -> DataSplits:
    """Read the five training batches and the test batch; pixels become byte/255."""
    root = find_cifar10(path) or path
    # read everything before building tensors so a bad file never yields a partial dataset
    train_parts = [_read_cifar_file(os.path.join(root, name)) for name in CIFAR10_TRAIN_FILES]
    test_pixels, test_labels = _read_cifar_file(os.path.join(root, CIFAR10_TEST_FILE))
    train_pixels = np.concatenate([p for p, _ in train_parts])
    train_labels = np.concatenate([l for _, l in train_parts])
    return DataSplits(
        train=Dataset(_to_unit(train_pixels), torch.from_numpy(train_labels), 10, "train"),
        validation=None,
        test=Dataset(_to_unit(test_pixels), torch.from_numpy(test_labels), 10, "test"),
    )


def _to_unit(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(pixels.astype(np.float32) / np.float32(255.0))


def synthetic_dataset(seed: int, n: int, shape=(3, 32, 32), num_classes: int = 10,
                      separation: float = 4.0, sigma: float = 0.15, split: str = "train",
                      sample_seed: Optional[int] = None) -> Dataset:
    """Gaussian blobs around per-class binary templates.

    Class ``k`` has template ``0.5 + (separation * sigma / 2) * p_k`` with
    ``p_k`` a random +/-1 pattern, so wherever two templates differ the
    per-pixel gap is ``separation * sigma``. Samples add N(0, sigma^2) pixel
    noise and are clamped to [0, 1]. Labels cycle so classes stay balanced.
    ``seed`` fixes the templates; ``sample_seed`` (default ``seed``) fixes
    the draws, so a test split can share templates with its training pool.
    """
    if n < num_classes:
        raise InputError(f"need n >= num_classes, got n={n}, K={num_classes}")
    g = torch.Generator().manual_seed(int(seed))
    patterns = torch.randint(0, 2, (num_classes, *shape), generator=g, dtype=torch.float32) * 2 - 1
    if sample_seed is not None:
        g = torch.Generator().manual_seed(int(sample_seed))
    templates = 0.5 + (separation * sigma / 2.0) * patterns
    labels = torch.arange(n) % num_classes
    labels = labels[torch.randperm(n, generator=g)]
    noise = torch.randn((n, *shape), generator=g) * sigma
    images = (templates[labels] + noise).clamp_(0.0, 1.0)
    return Dataset(images, labels, num_classes, split)


def split_validation(dataset: Dataset, n_valid: int = 1000, seed: int = 0) -> Tuple[Dataset, Dataset]:
    if not 0 < n_valid < len(dataset):
        raise InputError(f"n_valid={n_valid} must be in (0, {len(dataset)})")
    perm = torch.randperm(len(dataset), generator=torch.Generator().manual_seed(int(seed)))
    return dataset.subset(perm[n_valid:], "train"), dataset.subset(perm[:n_valid], "validation")


def subsample(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Class-balanced random subset of size ``n`` (remainder spread over the first classes)."""
    if n > len(dataset):
        raise InputError(f"cannot take {n} examples from {len(dataset)}")
    g = torch.Generator().manual_seed(int(seed))
    per_class, extra = divmod(n, dataset.num_classes)
    chosen = []
    for k in range(dataset.num_classes):
        idx = torch.nonzero(dataset.labels == k).flatten()
        idx = idx[torch.randperm(len(idx), generator=g)]
        chosen.append(idx[: per_class + (1 if k < extra else 0)])
    picked = torch.cat(chosen)
    if len(picked) != n:
        raise InputError(f"dataset too unbalanced for a {n}-example balanced subset")
    return dataset.subset(picked.sort().values)


def augment(x: torch.Tensor, generator: torch.Generator, pad: int = 4, flip: bool = True) -> torch.Tensor:
    """Random crop after zero padding plus horizontal flip; output stays in [0, 1]."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    offsets = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
    flips = torch.rand(n, generator=generator) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flip and flips[i] else crop
    return out


def iterate_batches(dataset: Dataset, batch_size: int, generator: torch.Generator, shuffle: bool = True,
                    augmentation: bool = False) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Yield (x, y) batches in an order fixed by ``generator``; the last batch may be short."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    n = len(dataset)
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.images[idx]
        if augmentation:
            x = augment(x, generator)
        yield x, dataset.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size
