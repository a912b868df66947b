import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from matssl import tensor as T
from matssl.tensor import Tensor

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def param(rng, *shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(size=shape) * scale + offset, requires_grad=True)


@pytest.fixture
def f64():
    """Store tensors in float64 so finite differences resolve to ~1e-10."""
    with T.storage_dtype(np.float64):
        yield


@pytest.fixture(autouse=True)
def clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()
