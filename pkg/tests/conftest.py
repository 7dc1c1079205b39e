import numpy as np
import pytest

from fockbox.equilibrium import (
    InteractionPotential,
    dispersion_relation,
    equilibrium_correlation,
    gaussian_distribution,
)
from fockbox.dynamics import build_separations, equilibrium_state, truncate_distribution
from fockbox.lattice import Grid


@pytest.fixture(scope="session")
def small_setup():
    """Shared 1-d configuration: weak even pair potential, gaussian occupation."""
    grid = Grid(1, 32, 10.0)
    g = truncate_distribution(gaussian_distribution(grid, rho=0.4, sigma=0.8), 1e-10)
    w = InteractionPotential(point_masses=(((0.7,), 0.2), ((-0.7,), 0.2)))
    theta = dispersion_relation(w, g)
    return {
        "grid": grid,
        "g": g,
        "w": w,
        "theta": theta,
        "eq": equilibrium_correlation(g),
        "seps": build_separations(w),
        "state": equilibrium_state(g),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
