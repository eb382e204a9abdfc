import numpy as np
import pytest

from rramcim.harness import datasets


@pytest.fixture(scope="session")
def digits():
    return datasets.digits_split(seed=0)


@pytest.fixture(scope="session")
def digits_binary():
    return datasets.digits_split(seed=0, binary=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
