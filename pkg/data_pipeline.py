#!/usr/bin/env python3
"""
CIFAR-10/100 binary ingestion, normalization, augmentation and batching.

Batch order depends only on (seed, epoch); each sample's augmentation draws
from its own generator derived from (seed, epoch, sample index), so results
do not depend on how many prefetch workers assemble the batches.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DatasetFormatError, DatasetLabelError, DatasetMissingError, NormalizationError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
PAD = 4

_LAYOUTS = {
    # variant -> (record bytes, label offset, class count, subdirectory, files per split)
    "cifar10": (
        PIXELS + 1, 0, 10, "cifar-10-batches-bin",
        {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    ),
    "cifar100": (
        PIXELS + 2, 1, 100, "cifar-100-binary",
        {"train": ["train.bin"], "test": ["test.bin"]},
    ),
}

_SHUFFLE_STREAM = 0
_AUGMENT_STREAM = 1


@dataclass
class Dataset:
    """Images [N, 3, 32, 32] (in [0, 1] until normalized) and labels [N]."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str
    name: str = "cifar10"

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, limit: Optional[int]) -> "Dataset":
        """First ``limit`` records in stored order."""
        if limit is None or limit >= len(self):
            return self
        return replace(self, images=self.images[:limit], labels=self.labels[:limit])


def _resolve_dir(directory: Path, subdir: str, files: Sequence[str]) -> Path:
    if all((directory / name).exists() for name in files):
        return directory
    nested = directory / subdir
    if nested.is_dir():
        return nested
    return directory


def load_cifar(directory: Union[str, Path], variant: str = "cifar10", split: str = "train") -> Dataset:
    """
    Read the CIFAR binary distribution.

    Args:
        directory: Folder holding the .bin files (or their standard subfolder)
        variant: "cifar10" or "cifar100" (fine labels)
        split: "train" or "test"

    Raises:
        DatasetMissingError: a split file is absent
        DatasetFormatError: a file is not a whole number of records
        DatasetLabelError: a label is outside [0, class_count)
    """
    if variant not in _LAYOUTS:
        raise ValueError(f"unknown dataset {variant!r}; expected cifar10 or cifar100")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}; expected train or test")
    record, label_at, classes, subdir, splits = _LAYOUTS[variant]
    root = _resolve_dir(Path(directory), subdir, splits[split])

    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for name in splits[split]:
        path = root / name
        if not path.is_file():
            raise DatasetMissingError(f"{variant} {split} file not found: {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise DatasetFormatError(
                f"{path}: size {raw.size} is not a multiple of the {record}-byte record"
            )
        rows = raw.reshape(-1, record)
        file_labels = rows[:, label_at].astype(np.int64)
        bad = np.flatnonzero(file_labels >= classes)
        if bad.size:
            raise DatasetLabelError(
                f"{path}: record {int(bad[0])} has label {int(file_labels[bad[0]])} >= {classes}"
            )
        images.append(rows[:, record - PIXELS:].reshape(-1, *IMAGE_SHAPE))
        labels.append(file_labels)

    pixels = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    dataset = Dataset(pixels, np.concatenate(labels), classes, split, variant)
    logger.info(f"Loaded {variant} {split}: {len(dataset):,} images from {root}")
    return dataset


def compute_channel_stats(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std over the whole split, in 64-bit."""
    values = dataset.images.astype(np.float64)
    return values.mean(axis=(0, 2, 3)), values.std(axis=(0, 2, 3))


def normalize(dataset: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    """Per-channel (x - mean) / std."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.size != 3 or std.size != 3:
        raise NormalizationError(f"expected 3 channel means and stds, got {mean.size} and {std.size}")
    mean = mean.reshape(1, 3, 1, 1)
    std = std.reshape(1, 3, 1, 1)
    if not np.all(np.isfinite(std)) or np.any(std <= 0):
        raise NormalizationError(f"normalization std must be positive, got {std.ravel().tolist()}")
    images = ((dataset.images - mean) / std).astype(np.float32)
    return replace(dataset, images=images)


def crop_and_flip(image: np.ndarray, dy: int, dx: int, flip: bool) -> np.ndarray:
    """
    Zero-pad by 4 pixels, take the 32x32 window at (dy, dx), optionally mirror.

    Offset (4, 4) without flip returns the original image.
    """
    padded = np.pad(image, ((0, 0), (PAD, PAD), (PAD, PAD)))
    h, w = image.shape[1:]
    window = padded[:, dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(window[:, :, ::-1] if flip else window)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop from the 4-pixel zero padding plus horizontal flip with p = 1/2."""
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = bool(rng.integers(0, 2))
    return crop_and_flip(image, int(dy), int(dx), flip)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, _AUGMENT_STREAM, index]))


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, _SHUFFLE_STREAM]))
    return rng.permutation(n)


@dataclass(frozen=True)
class BatchPlan:
    """
    How one epoch is cut into batches.

    ``min_batch = 2`` folds a trailing single-sample batch into the previous
    one (batch-norm over a 1x1 map needs at least two samples).
    """

    batch_size: int = 64
    seed: int = 0
    epoch: int = 0
    shuffle: bool = True
    augment: bool = True
    workers: int = 0
    min_batch: int = 1

    def for_epoch(self, epoch: int) -> "BatchPlan":
        return replace(self, epoch=epoch)


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def batch_bounds(n: int, batch_size: int, min_batch: int = 1) -> List[Tuple[int, int]]:
    """[start, stop) of each batch; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    bounds = [(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < min_batch:
        tail = bounds.pop()
        bounds[-1] = (bounds[-1][0], tail[1])
    return bounds


def _assemble(dataset: Dataset, plan: BatchPlan, indices: np.ndarray) -> Batch:
    if plan.augment:
        images = np.stack([
            augment(dataset.images[i], sample_rng(plan.seed, plan.epoch, int(i))) for i in indices
        ])
    else:
        images = dataset.images[indices]
    return Batch(Tensor(images), dataset.labels[indices], indices)


def batches(dataset: Dataset, plan: BatchPlan) -> Iterator[Batch]:
    """
    Yield the batches of one epoch in a deterministic order.

    With ``plan.workers > 0`` batches are assembled ahead on a thread pool;
    delivery order and content are unchanged.
    """
    order = (
        epoch_permutation(len(dataset), plan.seed, plan.epoch)
        if plan.shuffle else np.arange(len(dataset))
    )
    chunks = [order[a:b] for a, b in batch_bounds(len(dataset), plan.batch_size, plan.min_batch)]
    if plan.workers <= 0:
        for indices in chunks:
            yield _assemble(dataset, plan, indices)
        return

    depth = 2 * plan.workers
    with ThreadPoolExecutor(max_workers=plan.workers, thread_name_prefix="prefetch") as pool:
        pending = deque()
        for indices in chunks:
            pending.append(pool.submit(_assemble, dataset, plan, indices))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def train_plan(batch_size: int, seed: int, workers: int = 0) -> BatchPlan:
    return BatchPlan(batch_size=batch_size, seed=seed, shuffle=True, augment=True,
                     workers=workers, min_batch=2)


def eval_plan(batch_size: int, workers: int = 0) -> BatchPlan:
    return BatchPlan(batch_size=batch_size, shuffle=False, augment=False, workers=workers)
