import hypothesis
import numpy as np
import pytest

from fluid_twin.grid_core import PlaneSpec, SimGrid, build_grid
from fluid_twin.fluid_step import SimParams, StepConfig

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("default", max_examples=20, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile("default")


def channel_grid(dims=(6, 6, 6), dx=0.1):
    """SOLID floor at y=0, fluid in y=1..3, EMPTY above; inlet -x, outlet +x."""

    fluid = np.zeros(dims, dtype=bool)
    solid = np.zeros(dims, dtype=bool)
    solid[:, 0, :] = True
    fluid[:, 1:4, :] = True
    return build_grid(fluid, solid, dx, inlet_plane=PlaneSpec.parse("-x"), outlet_plane=PlaneSpec.parse("+x"))


def slab_grid(n=16, dx=0.1, low=4, high=12):
    """Free slab of fluid spanning x, bounded in y and z by EMPTY cells; inlet -x, outlet +x."""

    dims = (n, n, n)
    fluid = np.zeros(dims, dtype=bool)
    fluid[:, low:high, low:high] = True
    return build_grid(
        fluid, np.zeros(dims, dtype=bool), dx, inlet_plane=PlaneSpec.parse("-x"), outlet_plane=PlaneSpec.parse("+x")
    )


def block_grid(n=16, dx=0.1, margin=2):
    """A cube of fluid surrounded by EMPTY cells."""

    dims = (n, n, n)
    fluid = np.zeros(dims, dtype=bool)
    fluid[margin:n - margin, margin:n - margin, margin:n - margin] = True
    return build_grid(fluid, np.zeros(dims, dtype=bool), dx)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def channel():
    return channel_grid()


@pytest.fixture
def fd_params():
    return SimParams(
        v_in=[0.5, 0.1, 0.0],
        v_tilde_in=0.05,
        v_out=[0.4, 0.0, 0.05],
        rho=1.0,
        nu=0.01,
        b=0.3,
        d=0.2,
        g=[0.5, -9.8, 0.2],
        dt=0.02,
    )


@pytest.fixture
def upwind_cfg():
    return StepConfig(pressure_iters=30, convection_scheme="upwind")


@pytest.fixture
def empty_grid():
    return SimGrid.create((4, 4, 4), 0.1)
