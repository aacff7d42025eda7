from types import SimpleNamespace

import numpy as np
import pytest

from services.blocks import quantum_example as qx
from services.blocks.errors import DomainError
from services.blocks.numerics import make_uniform_grid
from services.blocks.potentials import (
    constant_potential,
    harmonic_potential,
    potential_from_spec,
    quantum_potential,
    time_reversed,
    zero_potential,
)


@pytest.fixture
def grid():
    return make_uniform_grid(-6.0, 6.0, 61)


def test_zero_potential(grid):
    pot = zero_potential()
    assert pot.is_zero
    assert np.array_equal(pot.eval(grid.points, 0.3), np.zeros(grid.n))
    assert pot.sup_abs(grid, 0.0, 1.0) == 0.0
    assert pot.local_upper_bound(-1, 1, 0, 1) == 0.0


def test_constant_potential(grid):
    pot = constant_potential(1.5)
    assert np.all(pot.eval(grid.points, 0.0) == 1.5)
    assert pot.lower_bound_M == 0.0
    assert pot.local_upper_bound(-1, 1, 0, 1) == 1.5
    assert constant_potential(-2.0).lower_bound_M == 2.0
    assert constant_potential(0.0).is_zero


def test_quantum_potential_matches_closed_form(grid):
    pot = quantum_potential()
    assert pot.time_dependent
    assert np.array_equal(pot.eval(grid.points, 0.5), qx.c_quantum(grid.points, 0.5))
    assert pot.check_lower_bound(grid, np.linspace(0, 1, 11))
    assert pot.sup_abs(grid, 0.0, 1.0) == pytest.approx(17.0)


@pytest.mark.parametrize("box", [(-1.0, 1.0, 0.0, 1.0), (-6.0, 6.0, 0.0, 0.25), (2.0, 5.0, 0.4, 0.9)])
def test_local_upper_bound_dominates_samples(box):
    pot = quantum_potential()
    x = np.linspace(box[0], box[1], 41)
    t = np.linspace(box[2], box[3], 21)
    values = pot.eval(x[None, :], t[:, None])
    assert pot.local_upper_bound(*box) >= np.max(np.clip(values, 0, None)) - 1e-12


def test_harmonic_potential_ground_state(grid):
    pot = harmonic_potential(2.0)
    x = grid.points
    phi = np.exp(-2.0 * x**2 / 4.0)
    # -φ'' + cφ = 0 for the ground state
    phi_xx = (2.0**2 * x**2 / 4.0 - 2.0 / 2.0) * phi
    assert np.allclose(pot.eval(x, 0.0) * phi, phi_xx)
    assert pot.check_lower_bound(grid, [0.0])
    with pytest.raises(DomainError):
        harmonic_potential(0.0)


def test_time_reversed_potential(grid):
    pot = quantum_potential()
    rev = time_reversed(pot, 1.0)
    assert np.array_equal(rev.eval(grid.points, 0.25), pot.eval(grid.points, 0.75))
    assert rev.local_upper_bound(-2, 2, 0.0, 0.25) == pot.local_upper_bound(-2, 2, 0.75, 1.0)
    static = constant_potential(1.0)
    assert time_reversed(static, 1.0) is static


def test_potential_from_spec():
    assert potential_from_spec(SimpleNamespace(name="harmonic", kappa=1.0, omega=3.0)).params == (("omega", 3.0),)
    assert potential_from_spec(SimpleNamespace(name="zero", kappa=1.0, omega=1.0)).is_zero
    with pytest.raises(DomainError):
        potential_from_spec(SimpleNamespace(name="coulomb", kappa=1.0, omega=1.0))
