import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from services.blocks.errors import DomainError, NumericError
from services.blocks.numerics import (
    RngStream,
    cumulative_mass,
    gradient,
    integrate_interval,
    interp_linear,
    make_uniform_grid,
    quad,
    sample_inverse_cdf,
)

finite = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)


def test_uniform_grid_points_and_weights():
    grid = make_uniform_grid(-1.0, 1.0, 5)
    assert np.allclose(grid.points, [-1.0, -0.5, 0.0, 0.5, 1.0])
    assert np.allclose(grid.weights, [0.25, 0.5, 0.5, 0.5, 0.25])
    assert grid.h == pytest.approx(0.5)
    with pytest.raises(ValueError):
        grid.points[0] = 3.0


@pytest.mark.parametrize("lo,hi,n", [(0.0, 1.0, 2), (1.0, 1.0, 11), (2.0, -2.0, 11), (0.0, np.inf, 11)])
def test_uniform_grid_rejects_bad_input(lo, hi, n):
    with pytest.raises(DomainError):
        make_uniform_grid(lo, hi, n)


@given(a=finite, b=finite)
def test_quad_is_exact_for_affine_functions(a, b):
    grid = make_uniform_grid(-3.0, 5.0, 33)
    assert quad(grid, a * grid.points + b) == pytest.approx(a * 8.0 + b * 8.0, abs=1e-9 * (1 + abs(a) + abs(b)))


@given(a=finite, b=finite)
def test_quad_is_linear(a, b):
    grid = make_uniform_grid(-2.0, 2.0, 41)
    u, v = np.sin(grid.points), np.exp(-grid.points**2)
    assert quad(grid, a * u + b * v) == pytest.approx(a * quad(grid, u) + b * quad(grid, v), abs=1e-9)


def test_quad_rejects_wrong_shape_and_nan():
    grid = make_uniform_grid(0.0, 1.0, 11)
    with pytest.raises(DomainError):
        quad(grid, np.ones(10))
    values = np.ones(11)
    values[3] = np.nan
    with pytest.raises(NumericError):
        quad(grid, values)


def test_integrate_interval_matches_quad_on_full_range():
    grid = make_uniform_grid(-4.0, 4.0, 81)
    values = np.exp(-grid.points**2)
    assert integrate_interval(grid, values, -10.0, 10.0) == pytest.approx(quad(grid, values), rel=1e-14)


def test_integrate_interval_partial_cells():
    grid = make_uniform_grid(0.0, 1.0, 11)
    assert integrate_interval(grid, np.ones(11), 0.05, 0.37) == pytest.approx(0.32)
    assert integrate_interval(grid, grid.points, 0.25, 0.75) == pytest.approx(0.25)
    assert integrate_interval(grid, np.ones(11), 0.6, 0.4) == 0.0
    assert integrate_interval(grid, np.ones(11), 2.0, 3.0) == 0.0


@given(slope=finite, icpt=finite)
def test_gradient_of_affine_field_is_its_slope(slope, icpt):
    grid = make_uniform_grid(-1.0, 3.0, 17)
    assert np.allclose(gradient(grid, slope * grid.points + icpt), slope, atol=1e-9 * (1 + abs(slope) + abs(icpt)))


def test_gradient_is_second_order_at_the_ends():
    grid = make_uniform_grid(0.0, 1.0, 11)
    assert np.allclose(gradient(grid, grid.points**2), 2.0 * grid.points, atol=1e-12)


def test_interp_linear_does_not_extrapolate():
    grid = make_uniform_grid(0.0, 1.0, 3)
    assert interp_linear(grid, [0.0, 1.0, 4.0], 0.75) == pytest.approx(2.5)
    with pytest.raises(DomainError):
        interp_linear(grid, [0.0, 1.0, 4.0], 1.5)


def test_cumulative_mass_ends_at_total():
    grid = make_uniform_grid(-5.0, 5.0, 101)
    values = np.exp(-grid.points**2)
    cdf = cumulative_mass(grid, values)
    assert cdf[0] == 0.0
    assert cdf[-1] == pytest.approx(quad(grid, values), rel=1e-12)
    assert np.all(np.diff(cdf) >= 0)


def test_sample_inverse_cdf_uniform_density():
    grid = make_uniform_grid(2.0, 4.0, 21)
    u = np.linspace(0.0, 0.999, 50)
    assert np.allclose(sample_inverse_cdf(grid, np.ones(21), u), 2.0 + 2.0 * u)


def test_sample_inverse_cdf_rejects_massless_density():
    grid = make_uniform_grid(0.0, 1.0, 5)
    with pytest.raises(DomainError):
        sample_inverse_cdf(grid, np.zeros(5), np.array([0.5]))


@settings(max_examples=25)
@given(seed=st.integers(min_value=0, max_value=2**64 - 1), stream=st.integers(min_value=0, max_value=1000))
def test_rng_stream_is_reproducible(seed, stream):
    a = RngStream(seed, stream).generator().standard_normal(8)
    b = RngStream(seed, stream).generator().standard_normal(8)
    assert np.array_equal(a, b)


def test_rng_substreams_are_distinct():
    root = RngStream(7, 2)
    draws = [root.substream(i).generator().random(4) for i in range(3)]
    assert not np.array_equal(draws[0], draws[1])
    assert not np.array_equal(draws[1], draws[2])
    assert not np.array_equal(RngStream(7, 2).generator().random(4), RngStream(7, 3).generator().random(4))
    assert root.substream(5).describe() == {"seed": 7, "stream_id": 2, "subkey": [5]}


def test_rng_stream_rejects_negative_keys():
    with pytest.raises(DomainError):
        RngStream(-1)
    with pytest.raises(DomainError):
        RngStream(1).substream(-3)
