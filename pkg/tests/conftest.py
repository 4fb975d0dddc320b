import numpy as np
import pytest

from thermoplate.geometry import (BoardGeometry, MaterialParams, build_grid,
                                  default_holes)
from thermoplate.grf import GrfConfig, sample_temperature
from thermoplate.solver import generate_sample


@pytest.fixture(scope="session")
def material():
    return MaterialParams()


@pytest.fixture(scope="session")
def board32():
    """Four holes scaled so a 32x32 grid resolves them."""
    return BoardGeometry(holes=default_holes(radius=0.015))


@pytest.fixture(scope="session")
def grid32(board32):
    return build_grid(board32, 32, 32)


@pytest.fixture(scope="session")
def board64():
    return BoardGeometry(holes=default_holes())


@pytest.fixture(scope="session")
def grid64(board64):
    return build_grid(board64, 64, 64)


@pytest.fixture(scope="session")
def grid_noholes():
    return build_grid(BoardGeometry(), 32, 32)


@pytest.fixture(scope="session")
def sample32(grid32, material):
    grid, classes = grid32
    T = sample_temperature(grid, GrfConfig(seed=11))
    return generate_sample(grid, classes, material, T)


def coord_arrays(grid):
    x = grid.x_coords()[None, :] * np.ones((grid.ny, 1))
    y = grid.y_coords()[:, None] * np.ones((1, grid.nx))
    return x, y
