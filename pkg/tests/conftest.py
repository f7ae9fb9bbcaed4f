"""Shared test fixtures for shardgrad tests."""
import os

import numpy as np
import pytest

from shardgrad.config import get_settings
from shardgrad.data_io import ImageDataset, load_idx, write_idx
from shardgrad.network import fc_spec, init_params
from shardgrad.tensor import Rng


def pytest_collection_modifyitems(config, items):
    """Skip ``slow`` tests unless real data or SHARDGRAD_RUN_SLOW is configured."""
    if any(os.environ.get(k) for k in ("SHARDGRAD_MNIST_DIR", "SHARDGRAD_CORPUS", "SHARDGRAD_RUN_SLOW")):
        return
    skip = pytest.mark.skip(reason="set SHARDGRAD_MNIST_DIR, SHARDGRAD_CORPUS or SHARDGRAD_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _fresh_settings():
    """Settings are cached per process; tests that patch env vars need a clean cache."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_spec():
    """8-8-8-4 sigmoid/softmax net; every hidden layer splits over up to 8 workers."""
    return fc_spec([8, 8, 8, 4])


@pytest.fixture
def small_params(small_spec, rng):
    return init_params(small_spec, rng)


@pytest.fixture
def small_batch(rng):
    """Four inputs for the 8-wide net with one-hot targets over 4 classes."""
    xs = rng.uniform(0.0, 1.0, 32).reshape(4, 8)
    ys = np.zeros((4, 4))
    ys[np.arange(4), [0, 1, 2, 3]] = 1.0
    return xs, ys


@pytest.fixture
def tiny_images(rng):
    """40 random 3x4 images with labels in 0..9."""
    images = rng.uniform(0.0, 1.0, 40 * 12).reshape(40, 12)
    return ImageDataset(images, rng.integers(0, 10, 40), rows=3, cols=4)


@pytest.fixture
def idx_files(tmp_path, rng):
    """IDX image/label pair of 20 random 4x4 images; returns (images_path, labels_path, pixels, labels)."""
    pixels = rng.integers(0, 256, (20, 16)).astype(np.float64) / 255.0
    labels = rng.integers(0, 10, 20)
    images_path = tmp_path / "images-idx3-ubyte"
    labels_path = tmp_path / "labels-idx1-ubyte"
    write_idx(pixels, labels, images_path, labels_path, rows=4, cols=4)
    return images_path, labels_path, pixels, labels


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("the quick brown fox jumps over the lazy dog\n" * 3, encoding="utf-8")
    return path


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@pytest.fixture
def mnist():
    """(10,000-sample training subset, test set) from SHARDGRAD_MNIST_DIR."""
    root = get_settings().mnist_dir
    if root is None:
        pytest.skip("SHARDGRAD_MNIST_DIR is not set")
    paths = [root / name for name in MNIST_FILES]
    train = load_idx(paths[0], paths[1])
    return train.subset(np.arange(min(10_000, len(train)))), load_idx(paths[2], paths[3])
