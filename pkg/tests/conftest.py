import numpy as np
import pytest

from flowvip import config


@pytest.fixture(autouse=True)
def float64_mode():
    """Oracles and gradient checks run in 64-bit; restore whatever a test set."""
    config.set_dtype("float64")
    yield
    config.set_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
