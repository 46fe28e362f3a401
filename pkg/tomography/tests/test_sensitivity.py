#test_sensitivity.py
import numpy as np
import pytest

from tomography.measurement import SourceArc, source_boundary_data
from tomography.sensitivity import (
    ParameterVariation,
    apply_adjoint,
    apply_hessian,
    apply_increment,
    apply_jacobian,
    linearize,
    linearize_sources,
    lipschitz_ratio,
)
from tomography.tests.conftest import DIRECT
from tomography.transport_core import (
    AngularFlux,
    ParameterPair,
    build_grid,
    build_quadrature,
    inflow_data,
    l2_inner,
    l2_norm,
    residual_norm,
    solve_forward,
)

STEPS = np.array([1e-1, 1e-2, 1e-3, 1e-4])


@pytest.fixture
def g(grid, quad):
    return source_boundary_data(grid, quad, SourceArc(center=0.3, width=np.pi / 2))


@pytest.fixture
def lin(params, g, grid, quad):
    return linearize(params, None, g, grid, quad, DIRECT)


@pytest.fixture
def variation(params, rng):
    return ParameterVariation(
        params.mu * rng.uniform(-0.5, 0.5, params.n_cells),
        params.sigma * rng.uniform(-0.5, 0.5, params.n_cells),
    )


def _moved(params, var, t):
    return ParameterPair(params.mu + t * var.hat_mu, params.sigma + t * var.hat_sigma, params.mu_max, params.sigma_max)


def _slope(values):
    return np.polyfit(np.log(STEPS), np.log(values), 1)[0]


def test_linearize_at_transparent_medium(grid, quad):
    params = ParameterPair.constant(grid, 0.0, 0.0, 1.0, 1.0)
    lin = linearize(params, None, inflow_data(grid, quad, 1.0), grid, quad, DIRECT)
    np.testing.assert_allclose(lin.base_flux.values, 1.0, rtol=1e-12)


def test_linearize_is_deterministic_and_accurate(params, g, grid, quad, lin):
    again = linearize(params, None, g, grid, quad, DIRECT)
    np.testing.assert_array_equal(again.base_flux.values, lin.base_flux.values)
    assert residual_norm(lin.base_flux, params, None, g, grid, quad) <= 1e-10 * l2_norm(lin.base_flux, grid, quad)


def test_sources_share_one_factorisation(params, grid, quad):
    boundary = [inflow_data(grid, quad, 1.0), inflow_data(grid, quad, 2.0)]
    lins = linearize_sources(params, boundary, grid, quad, DIRECT)
    assert lins[0].system is lins[1].system
    np.testing.assert_allclose(lins[1].base_flux.values, 2.0 * lins[0].base_flux.values, rtol=1e-12)

# ----------------------------------------------
# Jacobian

def test_jacobian_of_zero_variation(lin, grid):
    assert np.all(apply_jacobian(lin, ParameterVariation.zeros(grid.n_cells)).values == 0.0)


def test_jacobian_is_linear(lin, variation, rng, grid):
    w = apply_jacobian(lin, variation)
    np.testing.assert_array_equal(apply_jacobian(lin, 2 * variation).values, 2 * w.values)
    other = ParameterVariation(rng.standard_normal(grid.n_cells), rng.standard_normal(grid.n_cells))
    np.testing.assert_allclose(
        apply_jacobian(lin, variation + other).values,
        w.values + apply_jacobian(lin, other).values, rtol=1e-12, atol=1e-14)


def test_first_order_taylor_remainder(params, g, grid, quad, lin, variation):
    w = apply_jacobian(lin, variation)
    remainders = [
        l2_norm(solve_forward(_moved(params, variation, t), None, g, grid, quad, DIRECT) - lin.base_flux - t * w, grid, quad)
        for t in STEPS
    ]
    assert abs(_slope(remainders) - 2.0) <= 0.2

# ----------------------------------------------
# Hessian

def test_hessian_symmetry_and_bilinearity(lin, variation, rng, grid):
    other = ParameterVariation(rng.standard_normal(grid.n_cells), rng.standard_normal(grid.n_cells))
    np.testing.assert_array_equal(
        apply_hessian(lin, variation, other).values, apply_hessian(lin, other, variation).values)
    assert np.all(apply_hessian(lin, ParameterVariation.zeros(grid.n_cells), other).values == 0.0)


def test_increment_matches_the_difference_of_two_solves(params, g, grid, quad, lin, variation):
    for t in (0.5, 1e-1):
        direct = solve_forward(_moved(params, variation, t), None, g, grid, quad, DIRECT) - lin.base_flux
        increment = apply_increment(lin, variation, t)
        assert l2_norm(increment - direct, grid, quad) <= 1e-10 * l2_norm(direct, grid, quad)
    assert np.all(apply_increment(lin, variation, 0.0).values == 0.0)


def test_second_order_taylor_remainder_selects_the_minus_sign(lin, grid, quad, variation):
    w = apply_jacobian(lin, variation)
    hess = apply_hessian(lin, variation, variation)
    linear = [apply_increment(lin, variation, t) - t * w for t in STEPS]
    with_minus = [l2_norm(d - (0.5 * t * t) * hess, grid, quad) for d, t in zip(linear, STEPS)]
    with_plus = [l2_norm(d + (0.5 * t * t) * hess, grid, quad) for d, t in zip(linear, STEPS)]
    assert abs(_slope(with_minus) - 3.0) <= 0.3
    # flipping the sign of the right-hand side leaves a second-order remainder
    assert abs(_slope(with_plus) - 2.0) <= 0.2


@pytest.mark.parametrize("seed", [0, 5, 9, 17])
def test_second_order_slope_is_stable_across_draws(params, g, grid, quad, seed):
    rng = np.random.default_rng(seed)
    lin = linearize(params, None, g, grid, quad, DIRECT)
    variation = ParameterVariation(
        params.mu * rng.uniform(-0.5, 0.5, params.n_cells),
        params.sigma * rng.uniform(-0.5, 0.5, params.n_cells),
    )
    w = apply_jacobian(lin, variation)
    hess = apply_hessian(lin, variation, variation)
    remainders = [l2_norm(apply_increment(lin, variation, t) - t * w - (0.5 * t * t) * hess, grid, quad) for t in STEPS]
    # the smallest step still sits far above round-off
    assert remainders[-1] > 1e3 * np.finfo(float).eps * STEPS[-1] * l2_norm(w, grid, quad)
    assert abs(_slope(remainders) - 3.0) <= 0.3

# ----------------------------------------------
# Adjoint

def test_adjoint_identity(lin, grid, quad, rng):
    for _ in range(20):
        h = ParameterVariation(rng.standard_normal(grid.n_cells), rng.standard_normal(grid.n_cells))
        y = AngularFlux(rng.standard_normal((grid.n_cells, quad.n_dir)))
        forward = apply_jacobian(lin, h)
        backward = apply_adjoint(lin, y)
        lhs = l2_inner(forward, y, grid, quad)
        rhs = h.inner(backward, grid)
        scale = l2_norm(forward, grid, quad) * l2_norm(y, grid, quad) + h.norm(grid) * backward.norm(grid)
        assert abs(lhs - rhs) <= 1e-10 * scale


def test_adjoint_of_zero(lin, grid, quad):
    result = apply_adjoint(lin, AngularFlux.zeros(grid, quad))
    assert np.all(result.vector() == 0.0)


def test_adjoint_matches_dense_transpose_without_scattering(quad, rng):
    grid = build_grid(6, 2.0)
    params = ParameterPair.constant(grid, 0.5, 0.0, 1.0, 1.0)
    lin = linearize(params, None, inflow_data(grid, quad, rng.uniform(0.5, 1.0, (grid.n_faces, quad.n_dir))),
                    grid, quad, DIRECT)
    columns = [apply_jacobian(lin, ParameterVariation.from_vector(e)).values.ravel() for e in np.eye(2 * grid.n_cells)]
    jacobian = np.column_stack(columns)
    y = AngularFlux(rng.standard_normal((grid.n_cells, quad.n_dir)))
    expected = jacobian.T @ (y.values * quad.weights).ravel()
    result = apply_adjoint(lin, y)
    np.testing.assert_allclose(result.vector(), expected, rtol=1e-10, atol=1e-12)
    # derivative in sigma acts through (I - Theta) phi even at sigma = 0
    assert np.linalg.norm(result.hat_sigma) > 1e-6

# ----------------------------------------------
# Lipschitz continuity of the derivative

def test_derivative_lipschitz_ratio_is_stable(quad, rng):
    ratios = []
    for n in (8, 16):
        grid = build_grid(n, 2.0)
        g = inflow_data(grid, quad, 1.0)
        base = ParameterPair.constant(grid, 0.5, 1.0, 2.0, 4.0)
        direction = ParameterVariation(np.full(grid.n_cells, 0.2), np.full(grid.n_cells, -0.3))
        var = ParameterVariation(np.ones(grid.n_cells), np.ones(grid.n_cells))
        lin = linearize(base, None, g, grid, quad, DIRECT)
        for scale in (0.1, 0.01):
            other = _moved(base, direction, scale)
            ratios.append(lipschitz_ratio(lin, linearize(other, None, g, grid, quad, DIRECT), var))
    ratios = np.array(ratios)
    assert np.all(ratios > 0)
    assert ratios.max() / ratios.min() < 3.0
