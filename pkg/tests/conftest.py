import numpy as np
import pytest

from nlslab.spectral_core import ZERO_POTENTIAL, Grid1D, PotentialSpec, build_operator


@pytest.fixture(scope="session")
def well_small():
    """sech^2 well of depth 2 (e0 = -1 exactly) on a coarse grid."""
    return build_operator(Grid1D(20.0, 256), PotentialSpec("sech2", 2.0))


@pytest.fixture(scope="session")
def well_medium():
    return build_operator(Grid1D(40.0, 1024), PotentialSpec("sech2", 2.0))


@pytest.fixture(scope="session")
def well_2048():
    return build_operator(Grid1D(40.0, 2048), PotentialSpec("sech2", 2.0))


@pytest.fixture(scope="session")
def free_small():
    return build_operator(Grid1D(20.0, 256), ZERO_POTENTIAL)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_field(rng, n, smooth=None, grid=None):
    u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    if smooth is not None:
        u = grid.apply_flat(lambda lam: np.exp(-lam / smooth**2), u)
    return u
