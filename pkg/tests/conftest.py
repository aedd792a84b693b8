import numpy as np
import pytest
import torch

from etta import MLPBackbone, SplitSpec, generate_synthetic_domains, init_params, split_train_test

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def moons4():
    return generate_synthetic_domains("rotated_two_moons", 4, 200, [0, 30, 60, 90], seed=7)


@pytest.fixture(scope="session")
def moons4_splits(moons4):
    return [split_train_test(d, SplitSpec(0.7, 0)) for d in moons4]


@pytest.fixture
def small_params():
    """2-layer MLP with 2*8+8+8*6+6 + 2*6 = 90 parameters."""
    return init_params(MLPBackbone(2, 8, 6), 2, np.random.default_rng(0))


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
