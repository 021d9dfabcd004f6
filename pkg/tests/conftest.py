import numpy as np
import pytest

from xraygen import tensor as T


@pytest.fixture(autouse=True)
def _float64():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
