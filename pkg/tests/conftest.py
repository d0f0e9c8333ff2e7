import os

import pytest
from hypothesis import HealthCheck, settings

from spikefield.model import ModelSpec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def gauss():
    """b = 1, f(x) = x: H(t) = exp(-t^2/2) from delta_0."""
    return ModelSpec.affine_power(1.0, 0.0, 1.0)


@pytest.fixture(scope="session")
def quad():
    """b = 1 - x, f(x) = x^2."""
    return ModelSpec.affine_power(1.0, 1.0, 2.0)


@pytest.fixture(scope="session")
def stiff():
    """b = 2 - 2x, f(x) = x^10."""
    return ModelSpec.affine_power(2.0, 2.0, 10.0)
