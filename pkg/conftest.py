"""
Shared pytest fixtures: seeded generators, tiny specs and handcrafted CIFAR files.
"""

from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pytest

from tensor_core import set_num_workers
from topology import ConnectivityRule, NetworkSpec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs (minutes)")


def tiny_spec(variant: str = "bc", blocks=(1, 1, 1), growth_rate: int = 4, path: int = 2,
              input_size: int = 8, **extra) -> NetworkSpec:
    return NetworkSpec(
        variant=variant, blocks=blocks, growth_rate=growth_rate,
        rule=ConnectivityRule.from_path(path), input_size=input_size, **extra,
    )


def cifar_records(labels: Sequence[int], rng: np.random.Generator, fine: bool = False) -> bytes:
    """Raw CIFAR-10 (or CIFAR-100 with ``fine``) records with random pixels."""
    rows = []
    for label in labels:
        head = [label % 20, label] if fine else [label]
        pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
        rows.append(np.concatenate([np.array(head, dtype=np.uint8), pixels]))
    return np.concatenate(rows).tobytes()


def write_cifar10(directory: Path, train_per_file: int, test_count: int, seed: int = 0) -> Dict[str, np.ndarray]:
    """Write data_batch_1..5.bin and test_batch.bin; returns the labels per split."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    train_labels = []
    for i in range(1, 6):
        labels = rng.integers(0, 10, size=train_per_file)
        (directory / f"data_batch_{i}.bin").write_bytes(cifar_records(labels, rng))
        train_labels.append(labels)
    test_labels = rng.integers(0, 10, size=test_count)
    (directory / "test_batch.bin").write_bytes(cifar_records(test_labels, rng))
    return {"train": np.concatenate(train_labels), "test": test_labels}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def cifar10_dir(tmp_path):
    """A small CIFAR-10 tree: 5 x 8 training records and 12 test records."""
    directory = tmp_path / "cifar-10-batches-bin"
    labels = write_cifar10(directory, train_per_file=8, test_count=12)
    return directory, labels


@pytest.fixture
def single_worker():
    set_num_workers(1)
    yield
    set_num_workers(1)


@pytest.fixture(scope="session")
def cifar10_full():
    """The real CIFAR-10 binary directory from $SPARSENET_DATA_DIR, if present."""
    import os

    root = os.environ.get("SPARSENET_DATA_DIR")
    if not root:
        pytest.skip("SPARSENET_DATA_DIR not set")
    path = Path(root)
    for candidate in (path, path / "cifar-10-batches-bin"):
        if (candidate / "data_batch_1.bin").is_file():
            return candidate
    pytest.skip(f"CIFAR-10 binaries not found under {root}")
