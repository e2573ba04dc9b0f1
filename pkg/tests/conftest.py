import numpy as np
import pytest

from stokes_bloch import ViscosityModel, homogenized_tensor, make_grid, sample_viscosity
from stokes_bloch.cell import solve_cell_problems

LAYERED = ViscosityModel.layered_cosine(1.0, 0.5, axis=0)
PRODUCT = ViscosityModel.product_cosine(1.0, (0.3, 0.3))
PRODUCT_3D = ViscosityModel.product_cosine(1.0, (0.3, 0.2, 0.25))

# harmonic mean of 1 + 0.5 cos(2 pi y)
LAYERED_HARMONIC = np.sqrt(0.75)


@pytest.fixture(scope="session")
def layered_mu():
    return sample_viscosity(LAYERED, make_grid(2, 32))


@pytest.fixture(scope="session")
def product_mu():
    return sample_viscosity(PRODUCT, make_grid(2, 32))


@pytest.fixture(scope="session")
def layered_cell(layered_mu):
    return solve_cell_problems(layered_mu, "full_gradient")


@pytest.fixture(scope="session")
def layered_A(layered_mu, layered_cell):
    return homogenized_tensor(layered_mu, solution=layered_cell)


@pytest.fixture(scope="session")
def product_A(product_mu):
    return homogenized_tensor(product_mu)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
