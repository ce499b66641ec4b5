import numpy as np
import pytest

from liprf.field import VoxelField


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_field(rng):
    """8^3 field with positive density and random coefficients."""
    fld = VoxelField.zeros((8, 8, 8), np.array([-1.0, -1.0, -1.0]),
                           np.array([1.0, 1.0, 1.0]))
    fld.density[:] = rng.uniform(0.05, 2.0, size=fld.density.shape)
    fld.sh[:] = rng.normal(0.0, 0.4, size=fld.sh.shape)
    return fld


def random_unit(rng, n=None):
    shape = (3,) if n is None else (n, 3)
    d = rng.standard_normal(shape)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
