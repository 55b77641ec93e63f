import os
from pathlib import Path

import numpy as np
import pytest

from ffpipe.config import ENV_VARS
from ffpipe.data import Dataset, synthetic_blobs
from ffpipe.fetch import MNIST_FILES, cifar10_paths, mnist_paths
from ffpipe.layers import FFLayer
from ffpipe.schedule import TrainingPlan

NUM_CLASSES = 4
INPUT_DIM = 12


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale run, needs --runslow')
    config.addinivalue_line('markers', 'data: needs MNIST/CIFAR-10 files under FFPIPE_DATA_DIR')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep a developer's FFPIPE_* settings out of the tests."""
    for name in list(ENV_VARS) + ['FFPIPE_PRESET']:
        if name != 'FFPIPE_DATA_DIR':
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def make_plan():
    """Small float64 plan: 3 layers of width 10 over 12 inputs, 4 classes, E=S=4."""
    def _make(**changes) -> TrainingPlan:
        values = dict(layers=(INPUT_DIM, 10, 10, 10), epochs=4, splits=4, nodes=1, batch_size=16,
                      lr_ff=0.03, lr_head=0.01, seed=7, neg_strategy='random', classifier='goodness',
                      mode='sequential', precision='float64', num_classes=NUM_CLASSES)
        values.update(changes)
        return TrainingPlan(**values)
    return _make


@pytest.fixture
def blobs():
    data = synthetic_blobs(160, INPUT_DIM, NUM_CLASSES, 4.0, seed=3)
    return data.subset(slice(0, 96), name='train'), data.subset(slice(96, None), name='test')


@pytest.fixture
def train_set(blobs):
    return blobs[0]


@pytest.fixture
def test_set(blobs):
    return blobs[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_layer(rng):
    def _make(in_dim: int = 6, out_dim: int = 5, dtype=np.float64) -> FFLayer:
        return FFLayer.create(in_dim, out_dim, int(rng.integers(0, 2 ** 31)), dtype=dtype)
    return _make


def _data_dir() -> Path:
    return Path(os.getenv('FFPIPE_DATA_DIR', 'data'))


@pytest.fixture
def mnist_dir():
    data_dir = _data_dir()
    if not all(p.exists() for p in mnist_paths(data_dir).values()):
        pytest.skip(f"MNIST files ({', '.join(MNIST_FILES.values())}) not found in {data_dir}")
    return data_dir


@pytest.fixture
def cifar_dir():
    data_dir = _data_dir()
    paths = cifar10_paths(data_dir)
    if not all(p.exists() for p in paths['train'] + paths['test']):
        pytest.skip(f"CIFAR-10 binary batches not found in {data_dir}")
    return data_dir


def assert_same_layers(a, b):
    """Bitwise equality of parameters and optimizer state."""
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.weights, y.weights)
        assert np.array_equal(x.bias, y.bias)
        assert np.array_equal(x.adam_w.m, y.adam_w.m)
        assert np.array_equal(x.adam_w.v, y.adam_w.v)
        assert np.array_equal(x.adam_b.m, y.adam_b.m)
        assert np.array_equal(x.adam_b.v, y.adam_b.v)
        assert x.adam_w.t == y.adam_w.t
        assert x.adam_b.t == y.adam_b.t


def assert_same_model(a, b):
    assert_same_layers(a.layers, b.layers)
    assert (a.head is None) == (b.head is None)
    if a.head is not None:
        assert_same_layers([a.head], [b.head])
    assert_same_layers(a.perfopt_heads, b.perfopt_heads)


def sparse_strokes(n: int, num_classes: int = 10, side: int = 28, strokes: int = 80, seed: int = 0) -> Dataset:
    """
    Sparse, MNIST-like images: each class lights a fixed random set of pixels,
    each instance keeps most of them plus a few faint stray pixels.
    """
    rng = np.random.default_rng(seed)
    free = np.arange(num_classes, side * side)
    prototypes = [rng.choice(free, size=strokes, replace=False) for _ in range(num_classes)]
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.zeros((n, side * side), dtype=np.float32)
    for i, label in enumerate(labels):
        on = prototypes[label][rng.uniform(size=strokes) < 0.8]
        images[i, on] = rng.uniform(0.5, 1.0, size=len(on))
        stray = rng.choice(free, size=20, replace=False)
        images[i, stray] = np.maximum(images[i, stray], rng.uniform(0.0, 0.5, size=20))
    return Dataset(images, labels, num_classes, f"strokes-{num_classes}x{side * side}")
