import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynsel.ensemble import Architecture, BaselineNet, init_from_pretrained
from dynsel.numerics import RngStream

settings.register_profile("ci", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def small_arch():
    return Architecture(n_classes=3, in_dim=4, hidden=(5,))


@pytest.fixture
def small_ensemble(small_arch):
    base = BaselineNet.init(small_arch, RngStream(7))
    return init_from_pretrained(base, 3, 2, RngStream(8), init_scale=0.3)
