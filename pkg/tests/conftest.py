import numpy as np
import pytest

from polyfrac import fem, geometry, microstructure as ms, slip
from polyfrac.materials import MaterialParams
from polyfrac.solver import StaggeredConfig, tolerance_table


@pytest.fixture(scope="session")
def params():
    return MaterialParams()


def make_bicrystal_problem(
    n=6,
    inner_bc=None,
    params=None,
    oris=None,
    shear_rate=0.05,
    horizon=1.0,
    path=None,
):
    """Small two-grain problem used across the fem/solver tests."""
    params = params or MaterialParams()
    mesh = geometry.bicrystal_mesh(n, n)
    dup, cons = ms.duplicate_grain_boundary_nodes(mesh)
    if oris is None:
        oris = [(0.0, 0.0, 0.0), (0.0, 0.0, 25.0)]
    regions = ms.build_grain_regions(dup, oris)
    bcs = {
        "outer": fem.MicroBoundaryCondition.hard(),
        "inner": inner_bc or fem.MicroBoundaryCondition.flexible(
            params.flexibility_unit, 20.0 * params.flexibility_unit
        ),
    }
    load = fem.LoadProgram(shear_rate=shear_rate, horizon=horizon, path=path)
    return fem.FemProblem(dup, cons, regions, params, bcs, load)


@pytest.fixture()
def solver_config():
    return StaggeredConfig(tolerances=tolerance_table(1.0))


def random_plastic_state(rng, params, systems=None, strain=0.06):
    """A material point somewhere in the plastic regime, for tangent tests."""
    from polyfrac import constitutive as co

    systems = systems or slip.fcc_slip_systems()
    state = co.MaterialPointState.initial(len(systems))
    f = np.eye(3)
    f[0, 1] = strain * (0.5 + rng.random())
    f += 0.01 * (rng.random((3, 3)) - 0.5)
    f[2, :2] = 0.0
    f[:2, 2] = 0.0
    f[2, 2] = 1.0
    inputs = co.PointInputs(
        f=f,
        div_g=0.05 * (rng.random() - 0.5),
        d=0.3 * rng.random(),
        dt=0.05 + 0.1 * rng.random(),
    )
    phi = 0.4 * rng.random()
    return state, inputs, phi
