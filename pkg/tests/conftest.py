import functools

import numpy as np
import pytest

from gptqlab.calib import make_dataset
from gptqlab.tensor import accuracy, train_toy

# toy task shared by the end-to-end tests
TRAIN_SIZE, TEST_SIZE, CALIB_SIZE = 2048, 512, 256
EPOCHS, LR = 8, 3e-3


@functools.lru_cache(maxsize=None)
def toy_cnn(seed: int = 0):
    """(net, test set, calibration inputs) for one seeded toy task."""
    net, _ = train_toy("cnn", make_dataset("train_split", TRAIN_SIZE, seed), EPOCHS, seed=seed, lr=LR)
    test = make_dataset("test_split", TEST_SIZE, seed)
    calib = make_dataset("train_split", CALIB_SIZE, seed).inputs
    net.meta.update({"task_seed": seed, "data_shape": [1, 8, 8], "classes": 4, "arch": "cnn"})
    net.meta["test_accuracy"] = accuracy(net, test.inputs, test.labels)
    return net, test, calib


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cnn0():
    return toy_cnn(0)
