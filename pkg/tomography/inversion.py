# inversion.py
"""H1-Tikhonov regularisation minimised by projected Gauss-Newton.

The optimisation variable is the flat vector x = (mu, sigma). Data are the
detector-by-source measurement entries flattened row-major, with the plain
Euclidean norm.
"""

import csv
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Optional, Protocol, Union

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pydantic import BaseModel
# ----------------------------------------------
from core.errors import GeometryError, SolverError
from core.job_manager import JobManager, get_job_manager
from tomography.measurement import (
    DetectorSet,
    SourceSet,
    assemble_measurements,
    detector_functional,
    read_detectors,
    source_boundary_data,
)
from tomography.sensitivity import ParameterVariation, adjoint_from_state, adjoint_state, linearize as linearize_at
from tomography.transport_core import (
    AngularQuadrature,
    ParameterPair,
    SolverOptions,
    SpatialGrid,
    TransportSystem,
)

logger = logging.getLogger(__name__)

# ----------------------------------------------
# H1 geometry

class H1Metric:
    """Gram matrix of the discrete H1(R) inner product, block-diagonal over (mu, sigma).

    G = h^2 I + L, with L the graph Laplacian of the active cells (one-sided
    differences across shared edges, nothing across the staircase boundary).
    """

    def __init__(self, grid: SpatialGrid):
        self.grid = grid
        n_cells = grid.n_cells
        # east and north neighbours enumerate every interior edge once
        first = np.concatenate([np.nonzero(grid.neighbors[:, side] >= 0)[0] for side in (0, 2)])
        second = np.concatenate([grid.neighbors[grid.neighbors[:, side] >= 0, side] for side in (0, 2)])
        n_edges = len(first)
        difference = sp.csr_matrix(
            (np.concatenate([np.ones(n_edges), -np.ones(n_edges)]),
             (np.tile(np.arange(n_edges), 2), np.concatenate([first, second]))),
            shape=(n_edges, n_cells))
        self.laplacian = (difference.T @ difference).tocsc()
        self.gram = (grid.cell_area * sp.identity(n_cells, format="csc") + self.laplacian).tocsc()
        self._lu = spla.splu(self.gram)
        self._lock = threading.Lock()

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    def _split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (2 * self.n_cells,):
            raise GeometryError(f"expected a parameter vector of length {2 * self.n_cells}, got shape {x.shape}")
        return x[:self.n_cells], x[self.n_cells:]

    def apply(self, x: np.ndarray) -> np.ndarray:
        mu, sigma = self._split(x)
        return np.concatenate([self.gram @ mu, self.gram @ sigma])

    def solve(self, x: np.ndarray) -> np.ndarray:
        mu, sigma = self._split(x)
        with self._lock:
            return np.concatenate([self._lu.solve(mu), self._lu.solve(sigma)])

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.asarray(a) @ self.apply(b))

    def norm(self, x: np.ndarray) -> float:
        return math.sqrt(max(self.inner(x, x), 0.0))

    def field_norm(self, field: np.ndarray) -> float:
        """H1 norm of a single per-cell field."""
        return math.sqrt(max(float(field @ (self.gram @ field)), 0.0))

    def dense(self) -> np.ndarray:
        return sp.block_diag([self.gram, self.gram]).toarray()

# ----------------------------------------------
# Forward models

class ForwardModel(Protocol):
    """x -> flattened measurements, with its Euclidean Jacobian"""
    grid: SpatialGrid

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        ...

    def linearize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ...


class TransportForwardModel:
    """Measurement matrix of the transport chain as a function of x = (mu, sigma)"""

    def __init__(
        self,
        grid: SpatialGrid,
        quad: AngularQuadrature,
        sources: SourceSet,
        detectors: DetectorSet,
        mu_max: float,
        sigma_max: float,
        options: Optional[SolverOptions] = None,
        job_manager: Optional[JobManager] = None
    ):
        self.grid = grid
        self.quad = quad
        self.sources = sources
        self.detectors = detectors
        self.mu_max = mu_max
        self.sigma_max = sigma_max
        self.options = options or SolverOptions(method="direct")
        self.job_manager = job_manager
        self._boundary = [source_boundary_data(grid, quad, arc) for arc in sources.arcs]
        self._functionals = [detector_functional(grid, quad, arc) for arc in detectors.arcs]

    @property
    def data_shape(self) -> tuple[int, int]:
        return (len(self.detectors), len(self.sources))

    def params(self, x: np.ndarray) -> ParameterPair:
        return ParameterPair.from_vector(x, self.mu_max, self.sigma_max)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        matrix = assemble_measurements(
            self.params(x), self.sources, self.detectors, self.grid, self.quad, self.options, self._manager())
        return matrix.vector()

    def linearize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """F(x) and the Jacobian rows, one adjoint state per detector shared by all sources."""
        params = self.params(x)
        params.check_admissible()
        system = TransportSystem(params, self.grid, self.quad)
        manager = self._manager()

        def forward_job(j: int):
            def job():
                try:
                    return linearize_at(params, None, self._boundary[j], self.grid, self.quad, self.options, system=system)
                except SolverError as e:
                    raise e.with_context(f"source column {j}") from e
            return job

        lins = manager.map([forward_job(j) for j in range(len(self.sources))])
        states = manager.map([lambda y=y: adjoint_state(lins[0], y) for y in self._functionals])

        n_det, n_src = self.data_shape
        values = np.empty(n_det * n_src)
        jacobian = np.empty((n_det * n_src, 2 * self.grid.n_cells))
        for j, lin in enumerate(lins):
            readings = read_detectors(lin.base_flux, self.grid, self.quad, self.detectors)
            for i, z in enumerate(states):
                row = i * n_src + j
                values[row] = readings[i]
                # Euclidean gradient of the reading = cell area times the L2(R) Riesz gradient
                jacobian[row] = self.grid.cell_area * adjoint_from_state(lin, z).vector()
        return values, jacobian

    def _manager(self) -> JobManager:
        return self.job_manager or get_job_manager()


class LinearForwardModel:
    """F(x) = A x + b; stands in for the transport chain where closed-form answers are needed"""

    def __init__(self, grid: SpatialGrid, matrix: np.ndarray, offset: Optional[np.ndarray] = None):
        self.grid = grid
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != 2 * grid.n_cells:
            raise GeometryError(f"surrogate matrix must have {2 * grid.n_cells} columns, got shape {self.matrix.shape}")
        self.offset = np.zeros(self.matrix.shape[0]) if offset is None else np.asarray(offset, dtype=float)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x + self.offset

    def linearize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.evaluate(x), self.matrix

# ----------------------------------------------
# Problem and records

@dataclass
class TikhonovProblem:
    model: ForwardModel
    data: np.ndarray
    prior: np.ndarray
    mu_max: float
    sigma_max: float
    metric: H1Metric
    alpha0: float = 1e-2
    alpha_min: float = 1e-10
    cg_tol: float = 1e-8
    cg_max: int = 500
    inner_solver: Literal["cholesky", "cg"] = "cholesky"
    step_tol: float = 1e-6
    max_outer: int = 60

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).ravel()
        self.prior = np.asarray(self.prior, dtype=float)
        if not self.alpha0 > self.alpha_min > 0:
            raise GeometryError(f"need alpha0 > alpha_min > 0, got alpha0={self.alpha0}, alpha_min={self.alpha_min}")
        if self.prior.shape != (2 * self.metric.n_cells,):
            raise GeometryError(f"prior must have length {2 * self.metric.n_cells}, got shape {self.prior.shape}")
        self.bounds_pair(self.prior).check_admissible()

    def bounds_pair(self, x: np.ndarray) -> ParameterPair:
        return ParameterPair.from_vector(x, self.mu_max, self.sigma_max)


class IterationRecord(BaseModel):
    n: int
    alpha: float
    res: float
    tikhonov: float
    step_norm: float
    active_mu: int
    active_sigma: int


RECORD_COLUMNS = list(IterationRecord.model_fields)


def save_records_csv(records: list[IterationRecord], path: Union[str, Path], extra: Optional[dict[str, list]] = None) -> Path:
    """Write one row per outer iteration; `extra` adds named per-row columns (e.g. err)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = extra or {}
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RECORD_COLUMNS + list(extra))
        for index, record in enumerate(records):
            row = record.model_dump()
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in RECORD_COLUMNS]
                            + [repr(float(values[index])) for values in extra.values()])
    return path

# ----------------------------------------------
# Functional and derivatives

def alpha_schedule(n: int, alpha0: float, alpha_min: float) -> float:
    if n < 0:
        raise GeometryError(f"schedule index must be non-negative, got {n}")
    return max(alpha0 / 2.0 ** n, alpha_min)


def _as_vector(x: Union[ParameterPair, np.ndarray]) -> np.ndarray:
    return x.vector() if isinstance(x, ParameterPair) else np.asarray(x, dtype=float)


def tikhonov_value(x: Union[ParameterPair, np.ndarray], prob: TikhonovProblem, alpha: float) -> float:
    x = _as_vector(x)
    return _tikhonov_from_values(x, prob.model.evaluate(x), prob, alpha)


def _tikhonov_from_values(x: np.ndarray, values: np.ndarray, prob: TikhonovProblem, alpha: float) -> float:
    misfit = values - prob.data
    return float(misfit @ misfit) + alpha * prob.metric.inner(x - prob.prior, x - prob.prior)


def tikhonov_gradient(x: Union[ParameterPair, np.ndarray], prob: TikhonovProblem, alpha: float) -> ParameterVariation:
    """H1 Riesz representative: G^-1 [2 J^T (F(x) - M)] + 2 alpha (x - x0)."""
    x = _as_vector(x)
    values, jacobian = prob.model.linearize(x)
    gradient = prob.metric.solve(2.0 * jacobian.T @ (values - prob.data)) + 2.0 * alpha * (x - prob.prior)
    return ParameterVariation.from_vector(gradient)


def normal_operator(jacobian: np.ndarray, metric: H1Metric, alpha: float) -> spla.LinearOperator:
    size = jacobian.shape[1]
    return spla.LinearOperator(
        (size, size), matvec=lambda v: jacobian.T @ (jacobian @ np.ravel(v)) + alpha * metric.apply(np.ravel(v)),
        dtype=float)


def normal_operator_symmetry(jacobian: np.ndarray, metric: H1Metric, alpha: float, rng: np.random.Generator, trials: int = 5) -> float:
    """Largest relative asymmetry |<Na, b> - <a, Nb>| over random pairs."""
    operator = normal_operator(jacobian, metric, alpha)
    worst = 0.0
    for _ in range(trials):
        a, b = rng.standard_normal((2, jacobian.shape[1]))
        na, nb = operator.matvec(a), operator.matvec(b)
        scale = np.linalg.norm(na) * np.linalg.norm(b) + np.linalg.norm(a) * np.linalg.norm(nb)
        worst = max(worst, abs(float(na @ b - a @ nb)) / scale)
    return worst

# ----------------------------------------------
# Projected Gauss-Newton

def _clip(x: np.ndarray, n_cells: int, mu_max: float, sigma_max: float) -> np.ndarray:
    upper = np.concatenate([np.full(n_cells, mu_max), np.full(n_cells, sigma_max)])
    return np.clip(x, 0.0, upper)


def project(x_hat: ParameterPair) -> ParameterPair:
    """Cell-wise clip into [0, mu_max] x [0, sigma_max]."""
    return x_hat.with_vector(_clip(x_hat.vector(), x_hat.n_cells, x_hat.mu_max, x_hat.sigma_max))


@dataclass
class GaussNewtonUpdate:
    x_hat: np.ndarray
    x_next: np.ndarray
    cg_iterations: int
    active_mu: int
    active_sigma: int


def _data_space_solve(kernel: np.ndarray, rhs: np.ndarray, prob: TikhonovProblem) -> tuple[np.ndarray, int]:
    """Solve the m x m system (J G^-1 J^T + alpha I) y = rhs; returns (y, iterations)."""
    if prob.inner_solver == "cholesky":
        try:
            factor = la.cho_factor(kernel, lower=True, check_finite=True)
        except (la.LinAlgError, ValueError) as e:
            raise SolverError(f"Cholesky factorisation of the data-space system failed: {e}") from e
        return la.cho_solve(factor, rhs), 0

    counter = {"iterations": 0}

    def count(_):
        counter["iterations"] += 1

    y, info = spla.cg(kernel, rhs, rtol=prob.cg_tol, atol=0.0, maxiter=prob.cg_max, callback=count)
    if info != 0:
        achieved = float(np.linalg.norm(rhs - kernel @ y) / max(np.linalg.norm(rhs), np.finfo(float).tiny))
        raise SolverError("CG on the Gauss-Newton normal equations did not converge",
                          achieved_residual=achieved, iterations=counter["iterations"])
    return y, counter["iterations"]


def _gauss_newton_update(
    x: np.ndarray,
    values: np.ndarray,
    jacobian: np.ndarray,
    prob: TikhonovProblem,
    alpha: float
) -> GaussNewtonUpdate:
    """Minimiser of the linearised functional, computed in data space.

    With d = delta - (x0 - x), (J^T J + alpha G) d = J^T r' for
    r' = M - F(x) - J (x0 - x), hence d = G^-1 J^T y with
    (J G^-1 J^T + alpha I) y = r'. The data-space system has one row per
    measurement entry, whatever the number of cells.
    """
    metric = prob.metric
    towards_prior = prob.prior - x
    residual = prob.data - values - jacobian @ towards_prior
    # columns are the H1 Riesz representatives of the measurement rows
    representers = np.column_stack([metric.solve(row) for row in jacobian])
    kernel = jacobian @ representers
    kernel = 0.5 * (kernel + kernel.T) + alpha * np.eye(kernel.shape[0])
    y, iterations = _data_space_solve(kernel, residual, prob)
    logger.debug(f"data-space solve of size {kernel.shape[0]} done (alpha={alpha:.3e}, iterations={iterations})")

    x_hat = x + towards_prior + representers @ y
    n = metric.n_cells
    x_next = _clip(x_hat, n, prob.mu_max, prob.sigma_max)
    clipped = x_next != x_hat
    return GaussNewtonUpdate(x_hat, x_next, iterations, int(clipped[:n].sum()), int(clipped[n:].sum()))


def pgn_step(
    x_n: Union[ParameterPair, np.ndarray],
    prob: TikhonovProblem,
    alpha_n: float
) -> tuple[np.ndarray, np.ndarray]:
    """One projected Gauss-Newton step; returns (x_hat, x_next)."""
    x = _as_vector(x_n)
    values, jacobian = prob.model.linearize(x)
    update = _gauss_newton_update(x, values, jacobian, prob, alpha_n)
    return update.x_hat, update.x_next


def run_pgn(
    prob: TikhonovProblem,
    x_start: Union[ParameterPair, np.ndarray],
    alpha_target: float,
    callback: Optional[Callable[[int, np.ndarray], None]] = None
) -> tuple[np.ndarray, list[IterationRecord]]:
    """Iterate PGN with alpha_n = max(alpha0 / 2^n, alpha_min, alpha_target).

    Stops once alpha_n has reached its floor and the H1 step is below
    step_tol * (1 + ||x_n||), or after max_outer iterations. `callback(n, x_n)`
    sees every iterate the records describe.
    """
    x = _as_vector(x_start).copy()
    prob.bounds_pair(x).check_admissible()
    floor = max(alpha_target, prob.alpha_min)
    records: list[IterationRecord] = []

    for n in range(prob.max_outer):
        alpha_n = max(alpha_schedule(n, prob.alpha0, prob.alpha_min), alpha_target)
        if callback is not None:
            callback(n, x)
        try:
            values, jacobian = prob.model.linearize(x)
            update = _gauss_newton_update(x, values, jacobian, prob, alpha_n)
        except SolverError as e:
            raise e.with_context(f"outer iteration {n}, alpha {alpha_n:.3e}") from e

        step_norm = prob.metric.norm(update.x_next - x)
        record = IterationRecord(
            n=n,
            alpha=alpha_n,
            res=float(np.linalg.norm(values - prob.data)),
            tikhonov=_tikhonov_from_values(x, values, prob, alpha_n),
            step_norm=step_norm,
            active_mu=update.active_mu,
            active_sigma=update.active_sigma,
        )
        records.append(record)
        logger.info(
            f"PGN n={n} alpha={alpha_n:.3e} res={record.res:.6e} step={step_norm:.3e} "
            f"cg={update.cg_iterations} clipped=({update.active_mu}, {update.active_sigma})"
        )

        converged = alpha_n <= floor and step_norm <= prob.step_tol * (1.0 + prob.metric.norm(x))
        x = update.x_next
        if converged:
            break
    else:
        logger.warning(f"PGN stopped at max_outer={prob.max_outer} without meeting the step tolerance")
    return x, records
