import numpy as np
import pytest

from services.cauchy_service import CauchyService
from utils.geometry import build_annulus_grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def annulus_grid():
    return build_annulus_grid(0.01, 48, 32)


@pytest.fixture
def disk_grid():
    return build_annulus_grid(0, 64, 32, r_min=1e-4)


@pytest.fixture
def cauchy():
    return CauchyService(threads=2, trials=4, seed=0)
