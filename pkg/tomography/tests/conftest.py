#conftest.py
import numpy as np
import pytest

from core.job_manager import JobManager
from tomography.measurement import DetectorSet, SourceSet
from tomography.transport_core import ParameterPair, SolverOptions, build_grid, build_quadrature

DIRECT = SolverOptions(method="direct")


@pytest.fixture(scope="session")
def grid():
    return build_grid(8, 2.0)


@pytest.fixture(scope="session")
def quad():
    return build_quadrature(8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def params(grid, rng):
    """Scattering-dominated point with room to move inside the bounds."""
    return ParameterPair(
        rng.uniform(0.4, 0.6, grid.n_cells),
        rng.uniform(0.8, 1.2, grid.n_cells),
        mu_max=2.0,
        sigma_max=4.0,
    )


@pytest.fixture(scope="session")
def sources():
    return SourceSet.uniform(4, width=np.pi / 4)


@pytest.fixture(scope="session")
def detectors():
    return DetectorSet.uniform(4, width=np.pi / 4)


@pytest.fixture(scope="session")
def job_manager():
    with JobManager(max_workers=2) as manager:
        yield manager
