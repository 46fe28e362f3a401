#test_inversion.py
import logging

import numpy as np
import pytest

from core.errors import GeometryError, SolverError
from tomography.inversion import (
    RECORD_COLUMNS,
    H1Metric,
    LinearForwardModel,
    TikhonovProblem,
    TransportForwardModel,
    alpha_schedule,
    normal_operator_symmetry,
    pgn_step,
    project,
    run_pgn,
    save_records_csv,
    tikhonov_gradient,
    tikhonov_value,
)
from tomography.tests.conftest import DIRECT
from tomography.transport_core import ParameterPair

MU_MAX, SIGMA_MAX = 2.0, 4.0


@pytest.fixture(scope="module")
def metric(grid):
    return H1Metric(grid)


@pytest.fixture
def prior(grid):
    return ParameterPair.constant(grid, 0.5, 1.0, MU_MAX, SIGMA_MAX).vector()


@pytest.fixture
def truth(grid, rng):
    return np.concatenate([rng.uniform(0.4, 0.6, grid.n_cells), rng.uniform(0.8, 1.2, grid.n_cells)])


@pytest.fixture
def surrogate(grid, rng):
    return LinearForwardModel(grid, rng.standard_normal((200, 2 * grid.n_cells)) / 10)


def _problem(model, data, prior, metric, **overrides):
    return TikhonovProblem(model, data, prior, MU_MAX, SIGMA_MAX, metric, **overrides)

# ----------------------------------------------
# Schedule and projection

def test_alpha_schedule():
    assert alpha_schedule(0, 1e-2, 1e-10) == 1e-2
    assert alpha_schedule(3, 1e-2, 1e-10) == pytest.approx(1.25e-3)
    assert alpha_schedule(100, 1e-2, 1e-10) == 1e-10
    with pytest.raises(GeometryError):
        alpha_schedule(-1, 1e-2, 1e-10)


def test_project_leaves_admissible_points_alone(grid, truth):
    pair = ParameterPair.from_vector(truth, MU_MAX, SIGMA_MAX)
    np.testing.assert_array_equal(project(pair).vector(), truth)


def test_project_clips_and_is_idempotent(grid):
    mu = np.linspace(-1.0, 3.0, grid.n_cells)
    sigma = np.linspace(-2.0, 6.0, grid.n_cells)
    once = project(ParameterPair(mu, sigma, MU_MAX, SIGMA_MAX))
    np.testing.assert_array_equal(once.mu, np.clip(mu, 0.0, MU_MAX))
    np.testing.assert_array_equal(once.sigma, np.clip(sigma, 0.0, SIGMA_MAX))
    assert once.is_admissible()
    np.testing.assert_array_equal(project(once).vector(), once.vector())

# ----------------------------------------------
# H1 metric

def test_constants_only_see_the_mass_term(grid, metric):
    ones = np.ones(grid.n_cells)
    np.testing.assert_allclose(metric.laplacian @ ones, 0.0, atol=1e-12)
    assert metric.field_norm(ones) ** 2 == pytest.approx(grid.cell_area * grid.n_cells)


def test_gram_is_symmetric_positive_definite(grid, metric, rng):
    dense = metric.dense()
    np.testing.assert_array_equal(dense, dense.T)
    assert np.linalg.eigvalsh(dense).min() > 0
    x = rng.standard_normal(2 * grid.n_cells)
    np.testing.assert_allclose(metric.solve(metric.apply(x)), x, rtol=1e-10)
    with pytest.raises(GeometryError):
        metric.apply(np.ones(3))

# ----------------------------------------------
# Functional

def test_tikhonov_value(grid, metric, prior, truth, surrogate):
    data = surrogate.evaluate(truth)
    prob = _problem(surrogate, data, prior, metric)
    assert tikhonov_value(prior, prob, 0.3) == pytest.approx(float(np.sum((surrogate.evaluate(prior) - data) ** 2)))
    exact = _problem(surrogate, surrogate.evaluate(prior), prior, metric)
    assert tikhonov_value(prior, exact, 0.3) == 0.0
    expected = 0.3 * metric.inner(truth - prior, truth - prior)
    assert tikhonov_value(truth, prob, 0.3) == pytest.approx(expected, rel=1e-12)
    pair = ParameterPair.from_vector(truth, MU_MAX, SIGMA_MAX)
    assert tikhonov_value(pair, prob, 0.3) == tikhonov_value(truth, prob, 0.3)


def test_gradient_matches_finite_differences(grid, metric, prior, truth, surrogate, rng):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric)
    x = prior + 0.05 * rng.standard_normal(2 * grid.n_cells)
    gradient = tikhonov_gradient(x, prob, 1e-2).vector()
    for _ in range(3):
        direction = rng.standard_normal(2 * grid.n_cells)
        t = 1e-4
        difference = (tikhonov_value(x + t * direction, prob, 1e-2) - tikhonov_value(x - t * direction, prob, 1e-2)) / (2 * t)
        assert metric.inner(gradient, direction) == pytest.approx(difference, rel=1e-6)


def test_transport_jacobian_matches_finite_differences(grid, quad, sources, detectors, params, rng, job_manager):
    model = TransportForwardModel(grid, quad, sources, detectors, params.mu_max, params.sigma_max, DIRECT, job_manager)
    x = params.vector()
    values, jacobian = model.linearize(x)
    assert jacobian.shape == (len(detectors) * len(sources), 2 * grid.n_cells)
    np.testing.assert_allclose(values, model.evaluate(x), rtol=1e-12)
    direction = np.concatenate([params.mu, params.sigma]) * rng.uniform(-0.5, 0.5, 2 * grid.n_cells)
    t = 1e-4
    difference = (model.evaluate(x + t * direction) - model.evaluate(x - t * direction)) / (2 * t)
    np.testing.assert_allclose(jacobian @ direction, difference, rtol=1e-5, atol=1e-8 * np.abs(difference).max())


def test_normal_operator_is_symmetric(grid, metric, surrogate, rng):
    assert normal_operator_symmetry(surrogate.matrix, metric, 1e-3, rng) <= 1e-12

# ----------------------------------------------
# Projected Gauss-Newton step

def test_step_matches_dense_solve(grid, metric, prior, truth, surrogate, rng):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric, cg_tol=1e-12)
    x = prior + 0.01 * rng.standard_normal(2 * grid.n_cells)
    alpha = 1e-2
    jac, gram = surrogate.matrix, metric.dense()
    rhs = jac.T @ (prob.data - surrogate.evaluate(x)) + alpha * gram @ (prior - x)
    expected = x + np.linalg.solve(jac.T @ jac + alpha * gram, rhs)
    x_hat, x_next = pgn_step(x, prob, alpha)
    np.testing.assert_allclose(x_hat, expected, rtol=1e-7, atol=1e-8)
    np.testing.assert_array_equal(x_next, np.clip(x_hat, 0.0, np.repeat([MU_MAX, SIGMA_MAX], grid.n_cells)))


def test_large_alpha_pulls_the_step_to_the_prior(grid, metric, prior, truth, surrogate):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric)
    x_hat, _ = pgn_step(truth, prob, 1e8)
    assert np.linalg.norm(x_hat - prior) <= 1e-4 * np.linalg.norm(truth - prior)


def test_prior_is_a_fixed_point_for_exact_prior_data(grid, metric, prior, surrogate):
    prob = _problem(surrogate, surrogate.evaluate(prior), prior, metric)
    x_hat, x_next = pgn_step(prior, prob, 1e-2)
    np.testing.assert_array_equal(x_hat, prior)
    np.testing.assert_array_equal(x_next, prior)


def test_transport_fixed_point(grid, quad, sources, detectors, job_manager, metric):
    model = TransportForwardModel(grid, quad, sources, detectors, MU_MAX, SIGMA_MAX, DIRECT, job_manager)
    start = ParameterPair.constant(grid, 0.5, 1.0, MU_MAX, SIGMA_MAX).vector()
    prob = _problem(model, model.evaluate(start), start, metric)
    x_hat, _ = pgn_step(start, prob, 1e-3)
    np.testing.assert_array_equal(x_hat, start)

# ----------------------------------------------
# Outer loop

def test_run_pgn_stops_at_once_on_a_fixed_point(grid, metric, prior, surrogate):
    prob = _problem(surrogate, surrogate.evaluate(prior), prior, metric)
    x, records = run_pgn(prob, prior, alpha_target=prob.alpha0)
    assert len(records) == 1
    assert records[0].n == 0 and records[0].step_norm == 0.0
    np.testing.assert_array_equal(x, prior)


def test_run_pgn_recovers_a_well_posed_linear_truth(grid, metric, prior, truth, surrogate):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric)
    seen = []
    x, records = run_pgn(prob, prior, alpha_target=1e-10, callback=lambda n, x_n: seen.append(n))
    assert len(records) < prob.max_outer
    assert seen == [r.n for r in records]
    np.testing.assert_array_equal([r.alpha for r in records][:3], [1e-2, 5e-3, 2.5e-3])
    assert records[-1].alpha == 1e-10
    np.testing.assert_allclose(x, truth, atol=1e-6)


def test_run_pgn_holds_alpha_at_the_target(grid, metric, prior, truth, surrogate):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric)
    _, records = run_pgn(prob, prior, alpha_target=1e-3)
    assert min(r.alpha for r in records) == 1e-3


def test_run_pgn_warns_at_max_outer(grid, metric, prior, truth, surrogate, caplog):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric, max_outer=3)
    with caplog.at_level(logging.WARNING):
        _, records = run_pgn(prob, prior, alpha_target=1e-10)
    assert len(records) == 3
    assert "max_outer=3" in caplog.text


def test_cg_failure_is_reported_with_its_iteration(grid, metric, prior, truth, surrogate):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric, inner_solver="cg", cg_max=1, cg_tol=1e-14)
    with pytest.raises(SolverError) as info:
        run_pgn(prob, prior, alpha_target=1e-10)
    assert info.value.iterations == 1
    assert "outer iteration 0" in str(info.value)


@pytest.fixture
def short_surrogate(grid, rng):
    """Fewer rows than unknowns, like the detector-by-source measurements."""
    return LinearForwardModel(grid, rng.standard_normal((12, 2 * grid.n_cells)) / 10)


@pytest.mark.parametrize("inner_solver", ["cholesky", "cg"])
def test_step_at_tiny_alpha_is_the_minimum_norm_fit(grid, metric, prior, truth, short_surrogate, inner_solver):
    data = short_surrogate.evaluate(truth)
    prob = _problem(short_surrogate, data, prior, metric, inner_solver=inner_solver, cg_max=60)
    x_hat, _ = pgn_step(prior, prob, 1e-10)
    jac = short_surrogate.matrix
    assert np.linalg.norm(short_surrogate.evaluate(x_hat) - data) <= 1e-6 * np.linalg.norm(data - short_surrogate.evaluate(prior))
    # the H1 Riesz representative of the step lies in the row space of J
    moment = metric.apply(x_hat - prior)
    coefficients = np.linalg.lstsq(jac.T, moment, rcond=None)[0]
    np.testing.assert_allclose(jac.T @ coefficients, moment, rtol=0, atol=1e-8 * np.linalg.norm(moment))


def test_inner_solvers_agree(grid, metric, prior, truth, short_surrogate, rng):
    data = short_surrogate.evaluate(truth)
    x = prior + 0.01 * rng.standard_normal(2 * grid.n_cells)
    steps = [pgn_step(x, _problem(short_surrogate, data, prior, metric, inner_solver=solver, cg_tol=1e-12), 1e-4)[0]
             for solver in ("cholesky", "cg")]
    np.testing.assert_allclose(steps[0], steps[1], rtol=1e-8, atol=1e-10)


def test_run_pgn_reaches_alpha_min_on_underdetermined_data(grid, metric, prior, truth, short_surrogate):
    prob = _problem(short_surrogate, short_surrogate.evaluate(truth), prior, metric)
    _, records = run_pgn(prob, prior, alpha_target=prob.alpha_min)
    assert records[-1].alpha == prob.alpha_min
    assert len(records) < prob.max_outer
    assert records[-1].res <= 1e-6 * records[0].res


def test_records_csv(grid, metric, prior, truth, surrogate, tmp_path):
    prob = _problem(surrogate, surrogate.evaluate(truth), prior, metric, max_outer=4)
    _, records = run_pgn(prob, prior, alpha_target=1e-10)
    path = save_records_csv(records, tmp_path / "records.csv", extra={"err": [0.5] * len(records)})
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == RECORD_COLUMNS + ["err"]
    assert len(lines) == 1 + len(records)
    assert float(lines[1].split(",")[RECORD_COLUMNS.index("alpha")]) == 1e-2

# ----------------------------------------------
# Validation

def test_problem_validation(grid, metric, prior, surrogate):
    data = surrogate.evaluate(prior)
    with pytest.raises(GeometryError):
        _problem(surrogate, data, prior, metric, alpha0=1e-10, alpha_min=1e-10)
    with pytest.raises(GeometryError):
        _problem(surrogate, data, prior[:-1], metric)
    with pytest.raises(GeometryError):
        _problem(surrogate, data, -prior, metric)
    with pytest.raises(GeometryError):
        LinearForwardModel(grid, np.ones((3, 5)))


def test_tikhonov_value_decreases_once_alpha_is_held(grid, quad, sources, detectors, job_manager, metric, rng):
    model = TransportForwardModel(grid, quad, sources, detectors, MU_MAX, SIGMA_MAX, DIRECT, job_manager)
    start = ParameterPair.constant(grid, 0.5, 1.0, MU_MAX, SIGMA_MAX).vector()
    truth = start * (1.0 + 0.1 * rng.uniform(-1.0, 1.0, start.size))
    prob = _problem(model, model.evaluate(truth), start, metric, max_outer=20)
    _, records = run_pgn(prob, start, alpha_target=1e-3)
    held = np.array([r.tikhonov for r in records if r.alpha == 1e-3])
    assert len(held) >= 2
    assert np.all(np.diff(held) <= 1e-12 * held[0])
