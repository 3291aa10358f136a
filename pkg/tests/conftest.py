import numpy as np
import pytest

from rlrds.network import NetworkParams
from rlrds.harness import default_network, model_template


@pytest.fixture
def net() -> NetworkParams:
    """Benchmark generative truth at the sparse setting."""
    return default_network(rho1=2.0)


@pytest.fixture
def small_net() -> NetworkParams:
    """Two-covariate variant for cheap simulator tests."""
    return NetworkParams(rho0=1.0, rho1=1.0, mu=[0.0, 0.0],
                         sigma=np.eye(2), beta_y=np.zeros(7), seed_count=5)


@pytest.fixture
def template():
    return model_template(p=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(2024)
