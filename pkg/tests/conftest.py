import numpy as np
import pytest

from sgshuffle.data import SyntheticConfig, generate_synthetic, load_catalog


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture(scope="session")
def small_world():
    """Twelve small synthetic scenes with d_v = 8 and the catalog holding their counts."""
    return generate_synthetic(SyntheticConfig(n_scenes=12, n_objects_range=(3, 5), d_v=8, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
