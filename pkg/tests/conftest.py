import numpy as np
import pytest

from hvpsim.fields import ForcingFields, Grid, RheologyParams, StateField
from hvpsim.thermo import GrowthRate


@pytest.fixture
def params():
    return RheologyParams()


@pytest.fixture
def grid():
    return Grid.unit_square(12)


@pytest.fixture
def constant_state(grid):
    return StateField(
        np.zeros((grid.nx, grid.ny, 2)),
        np.full((grid.nx, grid.ny), 0.5),
        np.full((grid.nx, grid.ny), 0.5),
    )


@pytest.fixture
def quiet_forcing(grid):
    return ForcingFields.quiescent(grid, f_gr=GrowthRate.zero())


def smooth_state(grid, amp=0.1):
    from hvpsim.fields import enforce_dirichlet

    X, Y = grid.X, grid.Y
    v = amp * np.stack(
        [np.sin(np.pi * X) * np.sin(np.pi * Y), np.sin(2 * np.pi * X) * np.sin(np.pi * Y)],
        axis=-1,
    )
    h = 0.5 + 0.1 * np.cos(np.pi * X) * np.cos(np.pi * Y)
    a = 0.5 + 0.2 * np.cos(np.pi * X) * np.cos(np.pi * Y)
    return StateField(enforce_dirichlet(v, grid), h, a)
