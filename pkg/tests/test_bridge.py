from dataclasses import replace

import numpy as np
import pytest

from services.blocks import quantum_example as qx
from services.blocks.bridge import (
    BridgeSolution,
    TransitionDensity,
    make_boundary_data,
    propagate_density,
    propagate_fields,
    reversal_factorization_check,
    solve_schroedinger_system,
    transition_density,
)
from services.blocks.errors import ConsistencyError, ConvergenceError, DomainError, NumericError
from services.blocks.kernels import KernelMatrix, heat_matrix
from services.blocks.numerics import make_uniform_grid, quad


def _heat_solution(grid, rho0, rhoT, **kwargs):
    data = make_boundary_data(grid, rho0, rhoT, 1.0)
    return data, solve_schroedinger_system(heat_matrix(grid, 0.0, 1.0), data, **kwargs)


# -------------------------
# Boundary data
# -------------------------
def test_boundary_data_is_renormalized(small_grid, gaussian_pair):
    data = make_boundary_data(small_grid, *gaussian_pair, 1.0)
    assert quad(small_grid, data.rho0) == pytest.approx(1.0, rel=1e-14)
    assert quad(small_grid, data.rhoT) == pytest.approx(1.0, rel=1e-14)


def test_boundary_data_validation(small_grid, gaussian_pair):
    rho0, rhoT = gaussian_pair
    holed = rho0.copy()
    holed[40] = 0.0
    with pytest.raises(DomainError):
        make_boundary_data(small_grid, holed, rhoT, 1.0)
    with pytest.raises(DomainError):
        make_boundary_data(small_grid, rho0[:-1], rhoT, 1.0)
    with pytest.raises(DomainError):
        make_boundary_data(small_grid, rho0, rhoT, 0.0)


# -------------------------
# Schrödinger system
# -------------------------
def test_ipf_matches_both_marginals(small_grid, gaussian_pair):
    data, sol = _heat_solution(small_grid, *gaussian_pair, tol=1e-11)
    K, w = heat_matrix(small_grid, 0.0, 1.0).values, small_grid.weights
    left = sol.f0 * (K @ (w * sol.gT))
    right = sol.gT * ((w * sol.f0) @ K)
    assert np.dot(w, np.abs(left - data.rho0)) < 1e-11
    assert np.dot(w, np.abs(right - data.rhoT)) < 1e-11
    assert quad(small_grid, sol.f0) == pytest.approx(1.0, rel=1e-12)
    assert sol.final_residual == sol.history[-1] < 1e-11
    assert sol.iterations == len(sol.history)


def test_ipf_residual_is_non_increasing(small_grid, gaussian_pair):
    _, sol = _heat_solution(small_grid, *gaussian_pair)
    assert np.all(np.diff(sol.history) <= 1e-13)


def test_ipf_solution_does_not_depend_on_the_start(small_grid, gaussian_pair):
    _, a = _heat_solution(small_grid, *gaussian_pair, tol=1e-12)
    _, b = _heat_solution(small_grid, *gaussian_pair, tol=1e-12, init_f=np.exp(-small_grid.points**2 / 8.0))
    core = np.abs(small_grid.points) <= 4.0
    assert np.allclose(a.f0[core], b.f0[core], rtol=1e-8, atol=0)
    assert np.allclose(a.gT[core], b.gT[core], rtol=1e-8, atol=0)


def test_ipf_reports_non_convergence_with_history(small_grid, gaussian_pair):
    with pytest.raises(ConvergenceError) as exc:
        _heat_solution(small_grid, *gaussian_pair, max_iter=1)
    assert len(exc.value.history) == 1
    assert exc.value.history[0] > 0


def test_ipf_rejects_kernel_with_zero_entry(small_grid, gaussian_pair):
    data = make_boundary_data(small_grid, *gaussian_pair, 1.0)
    K = heat_matrix(small_grid, 0.0, 1.0)
    broken = K.values.copy()
    broken[3, 5] = 0.0
    with pytest.raises(NumericError):
        solve_schroedinger_system(KernelMatrix(grid=small_grid, s=0.0, t=1.0, values=broken, method="heat"), data)


def test_ipf_checks_kernel_span_and_grid(small_grid, gaussian_pair):
    data = make_boundary_data(small_grid, *gaussian_pair, 1.0)
    with pytest.raises(DomainError):
        solve_schroedinger_system(heat_matrix(small_grid, 0.0, 0.5), data)
    with pytest.raises(DomainError):
        solve_schroedinger_system(heat_matrix(make_uniform_grid(-6, 6, 95), 0.0, 1.0), data)


def test_solution_describe(small_grid, gaussian_pair):
    _, sol = _heat_solution(small_grid, *gaussian_pair)
    info = sol.describe()
    assert info["iterations"] == sol.iterations
    assert info["kernel_method"] == "heat"
    assert info["grid"]["n"] == small_grid.n


# -------------------------
# θ-fields
# -------------------------
def test_propagate_fields_endpoints(small_grid, gaussian_pair):
    data, sol = _heat_solution(small_grid, *gaussian_pair)
    sol = propagate_fields(sol, [heat_matrix(small_grid, 0.0, 0.5), heat_matrix(small_grid, 0.5, 1.0)])
    assert list(sol.time_mesh) == [0.0, 0.5, 1.0]
    assert np.array_equal(sol.f_field[0], sol.f0)
    assert np.array_equal(sol.g_field[-1], sol.gT)
    rho = sol.rho_field()
    assert np.allclose(rho[0], data.rho0, rtol=0, atol=1e-8)
    assert np.allclose(rho[-1], data.rhoT, rtol=0, atol=1e-8)
    assert quad(small_grid, rho[1]) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("lam", [1e-3, 0.37, 250.0])
def test_gauge_rescaling_leaves_the_bridge_unchanged(small_grid, gaussian_pair, lam):
    _, sol = _heat_solution(small_grid, *gaussian_pair)
    kernels = [heat_matrix(small_grid, 0.0, 0.5), heat_matrix(small_grid, 0.5, 1.0)]
    sol = propagate_fields(sol, kernels)
    other = propagate_fields(replace(sol, f0=lam * sol.f0, gT=sol.gT / lam), kernels)
    K = heat_matrix(small_grid, 0.0, 1.0).values
    joint = lambda s: s.f0[:, None] * K * s.gT[None, :]
    assert np.allclose(joint(other), joint(sol), rtol=1e-12, atol=0)
    assert np.allclose(other.rho_field(), sol.rho_field(), rtol=1e-12, atol=0)
    for k in kernels:
        assert np.allclose(transition_density(k, other).values, transition_density(k, sol).values, rtol=1e-12, atol=0)


def test_propagate_fields_rejects_gaps(small_grid, gaussian_pair):
    _, sol = _heat_solution(small_grid, *gaussian_pair)
    with pytest.raises(DomainError):
        propagate_fields(sol, [heat_matrix(small_grid, 0.0, 0.4), heat_matrix(small_grid, 0.5, 1.0)])
    with pytest.raises(DomainError):
        propagate_fields(sol, [heat_matrix(small_grid, 0.0, 0.5)])
    with pytest.raises(DomainError):
        propagate_fields(sol, [])


def test_fields_must_exist_before_time_lookup(small_grid, gaussian_pair):
    _, sol = _heat_solution(small_grid, *gaussian_pair)
    with pytest.raises(DomainError):
        sol.time_index(0.5)
    with pytest.raises(DomainError):
        transition_density(heat_matrix(small_grid, 0.0, 1.0), sol)


# -------------------------
# Transition densities
# -------------------------
def test_truncated_heat_rows_are_flagged():
    grid = make_uniform_grid(-3.0, 3.0, 31)
    ones = np.ones(grid.n)
    sol = BridgeSolution(grid=grid, T=1.0, f0=ones, gT=ones, iterations=0, final_residual=0.0,
                         time_mesh=np.array([0.0, 1.0]), f_field=np.vstack([ones, ones]),
                         g_field=np.vstack([ones, ones]))
    with pytest.raises(ConsistencyError):
        transition_density(heat_matrix(grid, 0.0, 1.0), sol)


def test_propagate_density_conserves_mass(heat_p_builder):
    p = heat_p_builder(0.0, 0.5)
    x = p.grid.points
    rho = np.exp(-x**2 / 2.0) / np.sqrt(2.0 * np.pi)
    out = propagate_density(p, rho)
    assert quad(p.grid, out) == pytest.approx(1.0, abs=1e-8)
    # variance grows by 2(t - s)
    assert quad(p.grid, x**2 * out) == pytest.approx(2.0, abs=1e-6)


def test_propagate_density_of_a_point_mass_is_a_row(heat_p_builder):
    p = heat_p_builder(0.0, 0.25)
    i = p.grid.index_of(1.0)
    spike = np.zeros(p.grid.n)
    spike[i] = 1.0 / p.grid.weights[i]
    assert np.allclose(propagate_density(p, spike), p.values[i], rtol=1e-14, atol=0)


def test_propagate_density_validation():
    grid = make_uniform_grid(-2, 2, 9)
    p = TransitionDensity(grid=grid, s=0.0, t=0.5, values=heat_matrix(grid, 0.0, 0.5).values)
    with pytest.raises(DomainError):
        propagate_density(p, np.ones(8))
    with pytest.raises(DomainError):
        propagate_density(p, -np.ones(9))


def test_reversal_factorization_for_free_process(small_grid, gaussian_pair):
    rho0, rhoT = gaussian_pair
    _, forward = _heat_solution(small_grid, rho0, rhoT, tol=1e-12)
    _, reverse = _heat_solution(small_grid, rhoT, rho0, tol=1e-12)
    assert reversal_factorization_check(forward, reverse, x_max=4.0) < 1e-6
    with pytest.raises(DomainError):
        reversal_factorization_check(forward, reverse, x_max=0.01)


# -------------------------
# Quantum example
# -------------------------
def test_quantum_bridge_converges(quantum_run):
    sol = quantum_run.solution
    assert sol.final_residual < 1e-10
    assert np.all(np.diff(sol.history) <= 1e-13)


def test_quantum_gT_is_proportional_to_theta(quantum_run):
    sol = quantum_run.solution
    core = np.abs(sol.grid.points) <= 4.0
    ratio = sol.gT[core] / qx.theta_exact(sol.grid.points[core], 1.0)
    assert np.max(np.abs(ratio / np.mean(ratio) - 1.0)) < 1e-2


def test_quantum_midpoint_density(quantum_run):
    sol = quantum_run.solution
    grid = sol.grid
    rho = sol.rho_field()[sol.time_index(0.5)]
    assert quad(grid, np.abs(rho - qx.rho_exact(grid.points, 0.5))) < 1e-2


@pytest.mark.parametrize("s,t", [(0.0, 0.25), (0.5, 1.0), (0.3, 0.72)])
def test_quantum_transition_rows_are_stochastic(quantum_p_builder, s, t):
    p = quantum_p_builder(s, t)
    assert np.max(np.abs(p.row_integrals() - 1.0)) < 1e-6


def test_quantum_transition_pushes_marginals(quantum_run, quantum_p_builder):
    sol = quantum_run.solution
    for t in (0.25, 0.5, 1.0):
        pushed = propagate_density(quantum_p_builder(0.0, t), quantum_run.data.rho0)
        assert np.allclose(pushed, sol.rho_field()[sol.time_index(t)], rtol=0, atol=1e-10)


def test_quantum_builder_rejects_bad_times(quantum_p_builder):
    with pytest.raises(DomainError):
        quantum_p_builder(0.5, 0.5)
    with pytest.raises(DomainError):
        quantum_p_builder(0.2, 1.5)
