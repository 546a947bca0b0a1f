import numpy as np
import pytest

from pcconf.embedsim import WorldConfig, generate_world


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
