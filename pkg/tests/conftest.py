import os
import tempfile

# logs of the test session go to a throwaway directory
os.environ.setdefault("FKBRIDGE_LOG_DIR", tempfile.mkdtemp(prefix="fkbridge-logs-"))

import numpy as np
import pytest

from services.blocks.config import load_run_config
from services.blocks.experiment_orchestrator import solve_bridge
from services.blocks.kernels import heat_matrix
from services.blocks.bridge import TransitionDensity
from services.blocks.numerics import make_uniform_grid


@pytest.fixture(scope="session")
def quantum_cfg(tmp_path_factory):
    return load_run_config(None, {
        "grid.lo": -8.0, "grid.hi": 8.0, "grid.n": 201,
        "potential.name": "quantum", "boundary.kind": "quantum",
        "output_dir": str(tmp_path_factory.mktemp("quantum")),
    })


@pytest.fixture(scope="session")
def quantum_run(quantum_cfg):
    """Quantum-example bridge on grid(-8, 8, 201); shared by bridge and diffusion tests."""
    return solve_bridge(quantum_cfg, threads=2)


@pytest.fixture(scope="session")
def quantum_p_builder(quantum_run):
    return quantum_run.p_builder()


@pytest.fixture(scope="session")
def heat_p_builder():
    """Transition densities of the free process (zero drift) on a wide grid."""
    grid = make_uniform_grid(-10.0, 10.0, 801)

    def build(s, t):
        return TransitionDensity(grid=grid, s=s, t=t, values=heat_matrix(grid, s, t).values)

    return build


@pytest.fixture
def small_grid():
    return make_uniform_grid(-6.0, 6.0, 97)


@pytest.fixture
def gaussian_pair(small_grid):
    x = small_grid.points
    rho0 = np.exp(-x**2 / 2.0)
    rhoT = np.exp(-(x - 1.0) ** 2 / 3.0)
    return rho0, rhoT
