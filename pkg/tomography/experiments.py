# experiments.py
"""Desk-scale experiments: consistency checks, twin-data calibration,
convergence rates in alpha and the fixed-alpha PGN study."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, model_validator
# ----------------------------------------------
from core.errors import CheckFailure, ConfigurationError, MeasurementFileError
from core.job_manager import JobManager
from core.settings import get_settings
from tomography.config import ExperimentConfig
from tomography.inversion import (
    H1Metric,
    IterationRecord,
    LinearForwardModel,
    TikhonovProblem,
    TransportForwardModel,
    normal_operator_symmetry,
    pgn_step,
    run_pgn,
    save_records_csv,
    tikhonov_gradient,
    tikhonov_value,
)
from tomography.measurement import (
    DetectorSet,
    MeasurementMatrix,
    SourceSet,
    apply_B,
    geometry_fingerprint,
    integrate_detector,
    load_measurements,
    save_measurements,
    source_boundary_data,
)
from tomography.phantom import phantom_parameters
from tomography.sensitivity import (
    ForwardLinearization,
    ParameterVariation,
    apply_adjoint,
    apply_hessian,
    apply_increment,
    apply_jacobian,
    linearize,
)
from tomography.transport_core import (
    AngularFlux,
    AngularQuadrature,
    BoundaryData,
    ParameterPair,
    SolverOptions,
    SpatialGrid,
    apply_collision,
    apply_theta,
    build_grid,
    build_quadrature,
    inflow_data,
    l2_inner,
    l2_norm,
    load_field_csv,
    outflow_trace,
    save_field_csv,
    save_quadrature_csv,
    solve_forward,
)

logger = logging.getLogger(__name__)

TAYLOR_STEPS = (1e-1, 1e-2, 1e-3, 1e-4)

# ----------------------------------------------
# Shared setup

@dataclass
class ExperimentContext:
    config: ExperimentConfig
    grid: SpatialGrid
    quad: AngularQuadrature
    sources: SourceSet
    detectors: DetectorSet
    truth: ParameterPair
    model: TransportForwardModel
    metric: H1Metric
    output_dir: Path

    @property
    def prior(self) -> np.ndarray:
        reg = self.config.regularization
        return prior_vector(self.grid, reg.mu0, reg.sigma0)

    @property
    def fingerprint(self) -> str:
        return geometry_fingerprint(self.grid, self.quad, self.sources, self.detectors)

    def measurements(self, x: np.ndarray) -> MeasurementMatrix:
        return MeasurementMatrix(self.model.evaluate(x).reshape(self.model.data_shape), self.fingerprint)


def prior_vector(grid: SpatialGrid, mu0: float, sigma0: float) -> np.ndarray:
    return np.concatenate([np.full(grid.n_cells, mu0), np.full(grid.n_cells, sigma0)])


def resolve_output_dir(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Path:
    return Path(out or config.output_dir or get_settings().output_dir)


def build_context(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> ExperimentContext:
    grid = build_grid(config.grid.n, config.grid.radius)
    quad = build_quadrature(config.quadrature.n_dir)
    src, det, phantom = config.sources, config.detectors, config.phantom
    sources = SourceSet.uniform(src.count, amplitude=src.amplitude, width=src.width, offset=src.offset)
    detectors = DetectorSet.uniform(det.count, width=det.width, offset=det.offset)
    truth = phantom_parameters(
        grid, phantom.mu_background, phantom.sigma_background, phantom.inclusions, phantom.mu_max, phantom.sigma_max)
    model = TransportForwardModel(
        grid, quad, sources, detectors, phantom.mu_max, phantom.sigma_max, config.solver.options())
    logger.info(
        f"Geometry: n={grid.n} ({grid.n_cells} cells, {grid.n_faces} boundary faces), "
        f"{quad.n_dir} directions, {len(sources)} sources, {len(detectors)} detectors"
    )
    return ExperimentContext(
        config=config, grid=grid, quad=quad, sources=sources, detectors=detectors, truth=truth,
        model=model, metric=H1Metric(grid), output_dir=resolve_output_dir(config, out))


def make_problem(
    ctx: ExperimentContext,
    data: np.ndarray,
    prior: Optional[np.ndarray] = None,
    step_tol: Optional[float] = None,
    max_outer: Optional[int] = None
) -> TikhonovProblem:
    reg = ctx.config.regularization
    return TikhonovProblem(
        model=ctx.model,
        data=data,
        prior=ctx.prior if prior is None else prior,
        mu_max=ctx.config.phantom.mu_max,
        sigma_max=ctx.config.phantom.sigma_max,
        metric=ctx.metric,
        alpha0=reg.alpha0,
        alpha_min=reg.alpha_min,
        cg_tol=reg.cg_tol,
        cg_max=reg.cg_max,
        inner_solver=reg.inner_solver,
        step_tol=reg.step_tol if step_tol is None else step_tol,
        max_outer=reg.max_outer if max_outer is None else max_outer,
    )


def loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log y against log x over the strictly positive entries."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def _write_rows(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path

# ----------------------------------------------
# check

class CheckResult(BaseModel):
    name: str
    value: float
    threshold: str
    passed: bool


class CheckReport(BaseModel):
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failed(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def raise_for_failures(self) -> None:
        if not self.passed:
            raise CheckFailure(self.failed)

    def save_csv(self, path: Path) -> Path:
        return _write_rows(path, ["name", "value", "threshold", "passed"],
                           [[r.name, r.value, r.threshold, r.passed] for r in self.results])


def _random_point(grid: SpatialGrid, mu_max: float, sigma_max: float, rng: np.random.Generator) -> ParameterPair:
    return ParameterPair(
        mu_max * rng.uniform(0.2, 0.8, grid.n_cells),
        sigma_max * rng.uniform(0.2, 0.8, grid.n_cells),
        mu_max,
        sigma_max,
    )


def _relative_variation(params: ParameterPair, rng: np.random.Generator) -> ParameterVariation:
    """Variation of at most half the local value, so points drawn in [0.2, 0.8] of the bounds stay admissible for t <= 0.5."""
    return ParameterVariation(
        params.mu * rng.uniform(-0.5, 0.5, params.n_cells),
        params.sigma * rng.uniform(-0.5, 0.5, params.n_cells),
    )


def taylor_remainders(
    grid: SpatialGrid,
    quad: AngularQuadrature,
    params: ParameterPair,
    g: BoundaryData,
    var: ParameterVariation,
    options: SolverOptions,
    steps: tuple[float, ...] = TAYLOR_STEPS
) -> tuple[np.ndarray, np.ndarray]:
    """First- and second-order Taylor remainders of S along var, one entry per step.

    The increment S(x + t var) - S(x) is solved for rather than formed from two
    solves, so the remainders stay above round-off down to the smallest step.
    """
    lin = linearize(params, None, g, grid, quad, options)
    w = apply_jacobian(lin, var)
    hess = apply_hessian(lin, var, var)
    first, second = [], []
    for t in steps:
        linear = apply_increment(lin, var, t) - t * w
        first.append(l2_norm(linear, grid, quad))
        second.append(l2_norm(linear - (0.5 * t * t) * hess, grid, quad))
    return np.array(first), np.array(second)


def adjoint_mismatch(lin: ForwardLinearization, rng: np.random.Generator, pairs: int = 20, adjoint_scale: float = 1.0) -> float:
    """Worst relative gap between <S'h, y> and <h, S'* y> over random pairs."""
    grid, quad = lin.grid, lin.quad
    worst = 0.0
    for _ in range(pairs):
        h = ParameterVariation(rng.standard_normal(grid.n_cells), rng.standard_normal(grid.n_cells))
        y = AngularFlux(rng.standard_normal((grid.n_cells, quad.n_dir)))
        forward = apply_jacobian(lin, h)
        backward = adjoint_scale * apply_adjoint(lin, y)
        lhs = l2_inner(forward, y, grid, quad)
        rhs = h.inner(backward, grid)
        scale = l2_norm(forward, grid, quad) * l2_norm(y, grid, quad) + h.norm(grid) * backward.norm(grid)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def gradient_mismatch(prob: TikhonovProblem, alpha: float, rng: np.random.Generator, points: int = 5, step: float = 1e-4) -> float:
    """Worst relative gap between central differences of the functional and <grad, d>_H1."""
    worst = 0.0
    for _ in range(points):
        x = _random_point(prob.metric.grid, prob.mu_max, prob.sigma_max, rng)
        d = _relative_variation(x, rng).vector() * 0.2
        analytic = prob.metric.inner(tikhonov_gradient(x, prob, alpha).vector(), d)
        x0 = x.vector()
        numeric = (tikhonov_value(x0 + step * d, prob, alpha) - tikhonov_value(x0 - step * d, prob, alpha)) / (2 * step)
        worst = max(worst, abs(numeric - analytic) / max(abs(analytic), abs(numeric), np.finfo(float).tiny))
    return worst


def surrogate_mismatch(grid: SpatialGrid, metric: H1Metric, rng: np.random.Generator, n_data: int = 24, alpha: float = 1e-2) -> float:
    """PGN step on F(x) = A x against the dense closed-form Tikhonov minimiser."""
    size = 2 * grid.n_cells
    matrix = rng.standard_normal((n_data, size)) / math.sqrt(size)
    data = rng.standard_normal(n_data)
    prior = rng.uniform(0.2, 0.8, size)
    prob = TikhonovProblem(
        model=LinearForwardModel(grid, matrix), data=data, prior=prior, mu_max=1e6, sigma_max=1e6,
        metric=metric, alpha0=1.0, alpha_min=1e-12, cg_tol=1e-12, cg_max=10 * size)
    x_hat, _ = pgn_step(prior, prob, alpha)
    gram = metric.dense()
    expected = np.linalg.solve(matrix.T @ matrix + alpha * gram, matrix.T @ data + alpha * gram @ prior)
    return float(np.linalg.norm(x_hat - expected) / np.linalg.norm(expected))


def cmd_check(config: ExperimentConfig, out: Optional[Union[str, Path]] = None, break_adjoint: bool = False) -> CheckReport:
    """Run the derivative, adjoint, operator and optimiser consistency checks.

    `break_adjoint` scales the adjoint by a wrong factor; the adjoint check must then fail.
    """
    ctx = build_context(config, out)
    rng = np.random.default_rng(config.seed)
    grid, quad, options = ctx.grid, ctx.quad, ctx.model.options
    phantom = config.phantom
    results: list[CheckResult] = []

    def record(name: str, value: float, threshold: str, passed: bool):
        results.append(CheckResult(name=name, value=value, threshold=threshold, passed=bool(passed)))
        logger.info(f"check {name}: {value:.3e} ({'ok' if passed else 'FAILED'}, want {threshold})")

    params = _random_point(grid, phantom.mu_max, phantom.sigma_max, rng)
    g = source_boundary_data(grid, quad, ctx.sources.arcs[0])
    lin = linearize(params, None, g, grid, quad, options)

    gap = adjoint_mismatch(lin, rng, adjoint_scale=1.5 if break_adjoint else 1.0)
    record("adjoint_identity", gap, "<= 1e-10", gap <= 1e-10)

    first, second = taylor_remainders(grid, quad, params, g, _relative_variation(params, rng), options)
    slope1, slope2 = loglog_slope(np.array(TAYLOR_STEPS), first), loglog_slope(np.array(TAYLOR_STEPS), second)
    record("taylor_first_order", slope1, "2.0 +- 0.2", abs(slope1 - 2.0) <= 0.2)
    record("taylor_second_order", slope2, "3.0 +- 0.3", abs(slope2 - 3.0) <= 0.3)

    phi = AngularFlux(rng.standard_normal((grid.n_cells, quad.n_dir)))
    once = apply_theta(phi, quad).values
    twice = apply_theta(apply_theta(phi, quad), quad).values
    drift = float(np.max(np.abs(twice - once)) / max(np.max(np.abs(once)), np.finfo(float).tiny))
    record("theta_projection", drift, "<= 4 eps", drift <= 4 * np.finfo(float).eps)

    lowest = min(
        l2_inner(apply_collision(p, params, quad), p, grid, quad) / l2_inner(p, p, grid, quad)
        for p in (AngularFlux(rng.standard_normal((grid.n_cells, quad.n_dir))) for _ in range(100))
    )
    record("collision_positive", lowest, ">= -1e-12", lowest >= -1e-12)

    inflow = inflow_data(grid, quad, rng.uniform(0.0, 1.0, (grid.n_faces, quad.n_dir)))
    peak = float(np.max(np.abs(solve_forward(params, None, inflow, grid, quad, options).values)))
    bound = float(np.max(np.abs(inflow.values)))
    record("maximum_principle", peak / bound, "<= 1 + rtol", peak <= bound * (1 + options.rtol))

    data = ctx.measurements(ctx.truth.vector()).vector()
    prob = make_problem(ctx, data)
    grad_gap = gradient_mismatch(prob, config.regularization.alpha0, rng)
    record("tikhonov_gradient", grad_gap, "<= 1e-5", grad_gap <= 1e-5)

    _, jacobian = ctx.model.linearize(params.vector())
    asymmetry = normal_operator_symmetry(jacobian, ctx.metric, config.regularization.alpha0, rng)
    record("normal_operator_symmetry", asymmetry, "<= 1e-10", asymmetry <= 1e-10)

    oracle_gap = surrogate_mismatch(grid, ctx.metric, rng)
    record("linear_surrogate_oracle", oracle_gap, "<= 1e-8", oracle_gap <= 1e-8)

    report = CheckReport(results=results)
    report.save_csv(ctx.output_dir / "check_report.csv")
    return report

# ----------------------------------------------
# calibrate

class PriorRun(BaseModel):
    mu0: float
    sigma0: float
    misfit: float
    h1_distance: float
    iterations: int


@dataclass
class CalibrationResult:
    x_dagger: np.ndarray
    m_phantom: MeasurementMatrix
    m_dagger: MeasurementMatrix
    misfit: float
    records: list[IterationRecord]
    prior_runs: list[PriorRun] = field(default_factory=list)


def _relative_misfit(values: np.ndarray, data: np.ndarray) -> float:
    scale = np.linalg.norm(data)
    if scale == 0:
        logger.warning("Phantom data are identically zero; reporting the absolute misfit")
        return float(np.linalg.norm(values - data))
    return float(np.linalg.norm(values - data) / scale)


def calibration_dir(ctx: ExperimentContext) -> Path:
    return ctx.output_dir / "calibration"


def cmd_calibrate(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> CalibrationResult:
    """Fit the phantom data at alpha_min; the minimiser (x_dagger, F(x_dagger)) is the twin-data ground truth."""
    ctx = build_context(config, out)
    reg = config.regularization
    folder = calibration_dir(ctx)

    m_phantom = ctx.measurements(ctx.truth.vector())
    logger.info(f"Calibration: fitting phantom data to alpha_min={reg.alpha_min:.1e}")
    prob = make_problem(ctx, m_phantom.vector())
    x_dagger, records = run_pgn(prob, ctx.prior, reg.alpha_min)
    m_dagger = ctx.measurements(x_dagger)
    misfit = _relative_misfit(m_dagger.vector(), m_phantom.vector())
    logger.info(f"Calibration done after {len(records)} iterations, relative misfit {misfit:.3e}")

    prior_runs = [PriorRun(mu0=reg.mu0, sigma0=reg.sigma0, misfit=misfit, h1_distance=0.0, iterations=len(records))]
    for other in reg.calibration_priors:
        logger.info(f"Calibration from alternative prior mu0={other.mu0}, sigma0={other.sigma0}")
        prior = prior_vector(ctx.grid, other.mu0, other.sigma0)
        x_other, other_records = run_pgn(make_problem(ctx, m_phantom.vector(), prior=prior), prior, reg.alpha_min)
        prior_runs.append(PriorRun(
            mu0=other.mu0,
            sigma0=other.sigma0,
            misfit=_relative_misfit(ctx.model.evaluate(x_other), m_phantom.vector()),
            h1_distance=ctx.metric.norm(x_other - x_dagger),
            iterations=len(other_records),
        ))

    n = ctx.grid.n_cells
    save_field_csv(x_dagger[:n], ctx.grid, folder / "mu_dagger.csv")
    save_field_csv(x_dagger[n:], ctx.grid, folder / "sigma_dagger.csv")
    save_field_csv(ctx.truth.mu, ctx.grid, folder / "mu_phantom.csv")
    save_field_csv(ctx.truth.sigma, ctx.grid, folder / "sigma_phantom.csv")
    save_measurements(m_phantom, folder / "measurements_phantom.csv")
    save_measurements(m_dagger, folder / "measurements_dagger.csv")
    save_records_csv(records, folder / "records.csv")
    _write_rows(folder / "priors.csv", list(PriorRun.model_fields),
                [list(run.model_dump().values()) for run in prior_runs])
    return CalibrationResult(x_dagger, m_phantom, m_dagger, misfit, records, prior_runs)


def load_calibration(ctx: ExperimentContext) -> tuple[np.ndarray, MeasurementMatrix]:
    """x_dagger and F(x_dagger) from a previous calibrate run in the same output directory."""
    folder = calibration_dir(ctx)
    for name in ("mu_dagger.csv", "sigma_dagger.csv"):
        if not (folder / name).is_file():
            raise MeasurementFileError(f"calibration artifact missing: {folder / name}")
    x_dagger = np.concatenate([
        load_field_csv(folder / "mu_dagger.csv", ctx.grid),
        load_field_csv(folder / "sigma_dagger.csv", ctx.grid),
    ])
    m_dagger = load_measurements(folder / "measurements_dagger.csv", ctx.fingerprint, ctx.model.data_shape)
    return x_dagger, m_dagger


def _calibration_for(config: ExperimentConfig, ctx: ExperimentContext) -> tuple[np.ndarray, MeasurementMatrix]:
    try:
        return load_calibration(ctx)
    except MeasurementFileError as e:
        logger.info(f"{e}; running calibration first")
        result = cmd_calibrate(config, ctx.output_dir)
        return result.x_dagger, result.m_dagger

# ----------------------------------------------
# rates

class RateRow(BaseModel):
    alpha: float
    res: float
    err: float


class RateTable(BaseModel):
    rows: list[RateRow]
    res_slope: float
    err_slope: float

    @model_validator(mode="after")
    def _alphas_decreasing(self) -> "RateTable":
        alphas = [row.alpha for row in self.rows]
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("rate table alphas must be strictly decreasing")
        return self

    @classmethod
    def from_rows(cls, rows: list[RateRow]) -> "RateTable":
        alphas = np.array([r.alpha for r in rows])
        return cls(
            rows=rows,
            res_slope=loglog_slope(alphas, np.array([r.res for r in rows])),
            err_slope=loglog_slope(alphas, np.array([r.err for r in rows])),
        )

    def err_monotone(self) -> bool:
        errors = [row.err for row in self.rows]
        return all(b <= a for a, b in zip(errors, errors[1:]))

    def save_csv(self, path: Path) -> Path:
        _write_rows(path.with_name(path.stem + "_slopes.csv"), ["column", "slope"],
                    [["res", self.res_slope], ["err", self.err_slope]])
        return _write_rows(path, ["alpha", "res", "err"], [[r.alpha, r.res, r.err] for r in self.rows])


@dataclass
class RateTruth:
    x_dagger: np.ndarray
    m_dagger: MeasurementMatrix
    # data-space element with x_dagger - x0 = G^-1 F'(x_dagger)^T w; None for the calibrated truth
    source: Optional[np.ndarray] = None


def source_condition_truth(
    ctx: ExperimentContext,
    rng: np.random.Generator,
    scale: float,
    max_iter: int = 50,
    tol: float = 1e-10
) -> RateTruth:
    """x_dagger = x0 + G^-1 F'(x_dagger)^T w for a random data-space element w.

    w is drawn once and sized so that no cell of x_dagger moves by more than
    `scale` times its prior value; the fixed point in x_dagger is then found
    by successive substitution.
    """
    n = ctx.grid.n_cells
    x0 = ctx.prior
    if np.any(x0 <= 0):
        raise ConfigurationError("the source-condition rate truth needs strictly positive mu0 and sigma0")
    _, jacobian = ctx.model.linearize(x0)
    w = rng.standard_normal(jacobian.shape[0])
    offset = ctx.metric.solve(jacobian.T @ w)
    relative = np.abs(offset) / x0
    w *= scale / max(float(relative[:n].max()), float(relative[n:].max()), np.finfo(float).tiny)

    x = x0 + ctx.metric.solve(jacobian.T @ w)
    for k in range(max_iter):
        _, jacobian = ctx.model.linearize(x)
        x_next = x0 + ctx.metric.solve(jacobian.T @ w)
        change = ctx.metric.norm(x_next - x)
        x = x_next
        logger.debug(f"source-condition truth: substitution {k}, H1 change {change:.3e}")
        if change <= tol * ctx.metric.norm(x - x0):
            break
    else:
        logger.warning(f"source-condition truth did not settle in {max_iter} substitutions (last change {change:.3e})")
    ParameterPair.from_vector(x, ctx.config.phantom.mu_max, ctx.config.phantom.sigma_max).check_admissible()
    return RateTruth(x, ctx.measurements(x), w)


def cmd_rates(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> RateTable:
    """res_alpha and err_alpha against a twin truth for every configured alpha.

    With rate_truth = source_condition (the default) the truth is built to
    satisfy the source condition exactly; with rate_truth = calibration it is
    the calibrated minimiser at alpha_min.
    """
    ctx = build_context(config, out)
    reg = config.regularization
    if reg.rate_truth == "calibration":
        truth = RateTruth(*_calibration_for(config, ctx))
    else:
        truth = source_condition_truth(ctx, np.random.default_rng(config.seed), reg.rate_source_scale)
        logger.info(f"Rate study: source-condition truth at H1 distance {ctx.metric.norm(truth.x_dagger - ctx.prior):.3e} from the prior")
        n = ctx.grid.n_cells
        save_field_csv(truth.x_dagger[:n], ctx.grid, ctx.output_dir / "rates_mu_dagger.csv")
        save_field_csv(truth.x_dagger[n:], ctx.grid, ctx.output_dir / "rates_sigma_dagger.csv")
        save_measurements(truth.m_dagger, ctx.output_dir / "rates_measurements_dagger.csv")
    x_dagger = truth.x_dagger
    data = truth.m_dagger.vector()
    prob = make_problem(ctx, data)

    def run(alpha: float):
        def job() -> RateRow:
            logger.info(f"Rate study: alpha={alpha:.1e}")
            x_alpha, _ = run_pgn(prob, ctx.prior, alpha)
            res = float(np.linalg.norm(ctx.model.evaluate(x_alpha) - data))
            return RateRow(alpha=alpha, res=res, err=ctx.metric.norm(x_alpha - x_dagger))
        return job

    # the alpha runs get their own pool; the solves inside them use the shared one
    with JobManager() as manager:
        rows = manager.map([run(alpha) for alpha in reg.rate_alphas])
    table = RateTable.from_rows(rows)
    logger.info(f"Rate slopes: res {table.res_slope:.3f}, err {table.err_slope:.3f}")
    table.save_csv(ctx.output_dir / "rates.csv")
    return table

# ----------------------------------------------
# pgn

@dataclass
class PgnStudy:
    alpha: float
    records: list[IterationRecord]
    errors: np.ndarray
    rho: float
    x_alpha: np.ndarray


def tail_ratio(errors: np.ndarray, start: int, floor: float) -> float:
    """Geometric decay factor of errors[start:], fitted on the entries above floor."""
    n = np.arange(len(errors))
    keep = (n >= start) & (errors > floor)
    if keep.sum() < 2:
        return float("nan")
    return float(np.exp(np.polyfit(n[keep], np.log(errors[keep]), 1)[0]))


def cmd_pgn(config: ExperimentConfig, out: Optional[Union[str, Path]] = None, alpha: Optional[float] = None) -> PgnStudy:
    """Linear convergence of PGN at fixed alpha towards the minimiser x_alpha."""
    ctx = build_context(config, out)
    reg = config.regularization
    alpha = alpha if alpha is not None else reg.alpha_fixed
    _, m_dagger = _calibration_for(config, ctx)
    data = m_dagger.vector()

    logger.info(f"PGN study: computing the minimiser at alpha={alpha:.1e}")
    reference = make_problem(ctx, data, step_tol=reg.step_tol * 1e-3, max_outer=2 * reg.max_outer)
    x_alpha, _ = run_pgn(reference, ctx.prior, alpha)

    logger.info("PGN study: restarting from the prior")
    iterates: list[np.ndarray] = []
    _, records = run_pgn(make_problem(ctx, data), ctx.prior, alpha, callback=lambda n, x: iterates.append(x.copy()))
    errors = np.array([ctx.metric.norm(x - x_alpha) for x in iterates])

    burn_in = next((r.n for r in records if r.alpha <= max(alpha, reg.alpha_min)), len(records))
    rho = tail_ratio(errors, burn_in, 1e-12 * (1.0 + ctx.metric.norm(x_alpha)))
    logger.info(f"PGN study: {len(records)} iterations, tail ratio {rho:.3f}")
    save_records_csv(records, ctx.output_dir / "pgn_records.csv", extra={"err": list(errors)})
    _write_rows(ctx.output_dir / "pgn_summary.csv", ["alpha", "rho", "iterations"], [[alpha, rho, len(records)]])
    return PgnStudy(alpha, records, errors, rho, x_alpha)

# ----------------------------------------------
# forward

@dataclass
class ForwardDump:
    measurements: MeasurementMatrix
    b_values: np.ndarray  # (faces, sources)
    fluxes: list[AngularFlux]


def cmd_forward(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> ForwardDump:
    """Solve for every source at the phantom and write flux slices, B-values and detector readings."""
    ctx = build_context(config, out)
    grid, quad, options = ctx.grid, ctx.quad, ctx.model.options
    folder = ctx.output_dir / "forward"

    fluxes, b_columns, readings = [], [], []
    for j, arc in enumerate(ctx.sources.arcs):
        phi = solve_forward(ctx.truth, None, source_boundary_data(grid, quad, arc), grid, quad, options)
        b_values = apply_B(outflow_trace(phi, grid, quad), grid, quad)
        fluxes.append(phi)
        b_columns.append(b_values)
        readings.append([integrate_detector(b_values, grid, det) for det in ctx.detectors.arcs])
        save_field_csv(phi.scalar_flux(quad), grid, folder / f"source_{j:02d}_theta.csv")
        for k in range(quad.n_dir):
            save_field_csv(phi.values[:, k], grid, folder / f"source_{j:02d}_dir_{k:02d}.csv")

    b_matrix = np.column_stack(b_columns)
    matrix = MeasurementMatrix(np.array(readings).T, ctx.fingerprint)
    angles = grid.face_angles()
    _write_rows(
        folder / "b_values.csv",
        ["face", "x", "y", "angle"] + [f"source_{j:02d}" for j in range(len(ctx.sources))],
        [[f, *grid.face_center[f], angles[f], *b_matrix[f]] for f in range(grid.n_faces)])
    save_measurements(matrix, folder / "measurements.csv")
    save_quadrature_csv(quad, folder / "quadrature.csv")
    save_field_csv(ctx.truth.mu, grid, folder / "mu.csv")
    save_field_csv(ctx.truth.sigma, grid, folder / "sigma.csv")
    logger.info(f"Forward dump written to {folder}")
    return ForwardDump(matrix, b_matrix, fluxes)
