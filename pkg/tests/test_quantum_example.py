import numpy as np
import pytest

from services.blocks import quantum_example as qx
from services.blocks.numerics import make_uniform_grid, quad


@pytest.fixture
def random_points():
    gen = np.random.default_rng(20240601)
    return gen.uniform(-4.0, 4.0, 100), gen.uniform(0.0, 1.0, 100)


def test_density_reference_values():
    assert qx.rho_exact(0.0, 0.0) == pytest.approx((2 * np.pi) ** -0.5, rel=1e-12)
    assert qx.rho_exact(0.0, 1.0) == pytest.approx((4 * np.pi) ** -0.5, rel=1e-12)


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
def test_density_is_normalized(t):
    grid = make_uniform_grid(-10.0, 10.0, 801)
    assert quad(grid, qx.rho_exact(grid.points, t)) == pytest.approx(1.0, abs=1e-8)


def test_theta_pair_at_origin():
    assert qx.theta_exact(0.0, 0.0) == pytest.approx((2 * np.pi) ** -0.25, rel=1e-12)
    assert qx.theta_star_exact(0.0, 0.0) == pytest.approx(qx.theta_exact(0.0, 0.0), rel=1e-15)


def test_theta_pair_factorizes_density(random_points):
    x, t = random_points
    assert np.allclose(qx.theta_exact(x, t) * qx.theta_star_exact(x, t), qx.rho_exact(x, t), rtol=1e-12, atol=0)


def test_madelung_exponentials(random_points):
    x, t = random_points
    R, S = qx.madelung_amplitude(x, t), qx.madelung_phase(x, t)
    assert np.allclose(qx.theta_exact(x, t), np.exp(R + S), rtol=1e-12, atol=0)
    assert np.allclose(qx.theta_star_exact(x, t), np.exp(R - S), rtol=1e-12, atol=0)
    modulus, phase = qx.psi_exact(x, t)
    assert np.allclose(modulus**2, qx.rho_exact(x, t), rtol=1e-12, atol=0)
    assert np.array_equal(phase, S)


def test_theta_at_final_time_is_flat():
    x = np.linspace(-5, 5, 11)
    assert np.allclose(qx.theta_exact(x, 1.0), qx.theta_exact(0.0, 1.0), rtol=1e-14, atol=0)


def test_drift_values():
    assert qx.b_exact(2.0, 0.0) == pytest.approx(-2.0)
    assert np.all(qx.b_exact(np.linspace(-3, 3, 7), 1.0) == 0.0)
    assert qx.b_exact(1.0, 0.25) == pytest.approx(-0.75 / 1.0625)


def test_drift_is_twice_log_gradient_of_theta(random_points):
    x, t = random_points
    assert np.allclose(qx.b_exact(x, t), 2.0 * qx.dx_log_theta(x, t), rtol=0, atol=1e-12)
    h = 1e-5
    fd = (np.log(qx.theta_exact(x + h, t)) - np.log(qx.theta_exact(x - h, t))) / (2 * h)
    assert np.allclose(qx.dx_log_theta(x, t), fd, atol=1e-7)


def test_time_derivative_of_log_theta(random_points):
    x, t = random_points
    h = 1e-5
    fd = (np.log(qx.theta_exact(x, t + h)) - np.log(qx.theta_exact(x, t - h))) / (2 * h)
    assert np.allclose(qx.dt_log_theta(x, t), fd, atol=1e-6)
    assert qx.dt_log_theta(0.0, 0.0) == pytest.approx(-0.5)
    assert qx.dx_b(0.0, 0.0) == pytest.approx(-1.0)


def test_velocities_add_up_to_the_drift(random_points):
    x, t = random_points
    assert np.allclose(qx.current_velocity(x, t) + qx.osmotic_velocity(x, t), qx.b_exact(x, t), atol=1e-14)
    h = 1e-5
    dS = (qx.madelung_phase(x + h, t) - qx.madelung_phase(x - h, t)) / (2 * h)
    assert np.allclose(qx.current_velocity(x, t), 2.0 * dS, atol=1e-7)


def test_potential_values():
    assert qx.c_quantum(0.0, 0.0) == pytest.approx(-1.0)
    assert qx.c_quantum(1.0, 0.0) == pytest.approx(-0.5)
    x, t = np.meshgrid(np.linspace(-6, 6, 61), np.linspace(0, 1, 11))
    assert np.all(qx.c_quantum(x, t) >= -qx.QuantumClosedForms.lower_bound_M)


def test_potential_from_density():
    x = np.linspace(-3, 3, 25)
    for t in (0.0, 0.4, 1.0):
        assert np.max(np.abs(qx.potential_from_density_residual(x, t))) < 1e-5


def test_parabolic_pair_residuals():
    x = np.linspace(-3, 3, 25)
    for t in (0.1, 0.5, 0.9):
        assert np.max(np.abs(qx.theta_equation_residual(x, t))) < 1e-5
        assert np.max(np.abs(qx.theta_star_equation_residual(x, t))) < 1e-5
        assert np.max(np.abs(qx.fokker_planck_residual(x, t))) < 1e-5


def test_compatibility_selected_variant_at_origin():
    assert qx.compatibility_residual(0.0, 0.0, "half_bracket") < 1e-10


def test_compatibility_selected_variant_everywhere():
    gen = np.random.default_rng(11)
    x, t = gen.uniform(-4, 4, 1000), gen.uniform(0, 1, 1000)
    assert np.max(qx.compatibility_residual(x, t, "half_bracket")) < 1e-9


def test_compatibility_rejects_printed_factor():
    assert qx.compatibility_residual(0.0, 0.0, "printed") >= 0.4


def test_compatibility_unknown_variant():
    with pytest.raises(ValueError):
        qx.compatibility_residual(0.0, 0.0, "other")


def test_closed_forms_bundle():
    forms = qx.QuantumClosedForms()
    x = np.linspace(-2, 2, 5)
    rho0, rhoT = forms.boundary_densities(x)
    assert np.array_equal(rho0, qx.rho_exact(x, 0.0))
    assert np.array_equal(rhoT, qx.rho_exact(x, 1.0))
    assert forms.b(1.0, 0.0) == qx.b_exact(1.0, 0.0)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 1.0])
def test_theta_gaussian_exponent(t):
    x = np.linspace(-4.0, 4.0, 17)
    ratio = qx.theta_exact(x, t) / qx.theta_exact(0.0, t)
    assert np.allclose(ratio, np.exp(-qx.theta_gaussian_exponent(t) * x**2), rtol=1e-13)
