import numpy as np
import pytest

from hierdex.env import default_catalog
from hierdex.expert import reference_task


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture(scope="session")
def short_task(catalog):
    """Reference lift-and-place shortened to 80 steps for unit tests."""
    return reference_task(catalog, steps=80, seed=123)


def random_rot(rng):
    from hierdex.geom import Rot

    v = rng.standard_normal(4)
    v /= np.linalg.norm(v)
    return Rot.from_wxyz(v[0], v[1], v[2], v[3])
