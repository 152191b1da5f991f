import numpy as np
import pytest

from grevf.exact import Dataset
from grevf.kernels import Kernel

DOMAIN = (0.0, 5.0)


def make_dataset(N, seed=0, noise=0.1, domain=DOMAIN):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(*domain, N))
    y = np.sin(2.0 * X) + np.sqrt(noise) * rng.standard_normal(N)
    return Dataset(X, y, noise, domain)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def se():
    return Kernel("se", 1.0, 1.0)


@pytest.fixture
def ds20():
    return make_dataset(20, seed=3)


@pytest.fixture
def single():
    """N = 1 fixture: x = 0, y = 1, sigma^2 = 0.1."""
    return Dataset([0.0], [1.0], 0.1)
