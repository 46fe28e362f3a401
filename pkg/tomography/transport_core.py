# transport_core.py
"""Stationary radiative transfer on a disk: discrete ordinates in angle,
first-order upwind finite volumes on a masked Cartesian grid in space.

Layout conventions used throughout the package:
  - active cells are numbered in row-major order of the mask (row = y index);
  - angular quantities are arrays of shape (cells, directions), flattened with
    the direction index running fastest (unknown u = cell * K + k);
  - boundary quantities are arrays of shape (faces, directions).
"""

import logging
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pydantic import BaseModel, Field
# ----------------------------------------------
from core.errors import GeometryError, SolverError

logger = logging.getLogger(__name__)

# Cell sides in a fixed order: east, west, north, south
FACE_NORMALS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
_SIDE_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array

# ----------------------------------------------
# Domain types

@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Cartesian n x n cell grid on [-radius, radius]^2 masked to the disk"""
    n: int
    h: float
    radius: float
    interior_mask: np.ndarray   # (n, n), indexed [row, column]
    cell_index: np.ndarray      # (n, n), active cell id or -1
    centers: np.ndarray         # (N, 2)
    neighbors: np.ndarray       # (N, 4), neighbouring cell id per side or -1
    face_cell: np.ndarray       # (F,)
    face_side: np.ndarray       # (F,)
    face_normal: np.ndarray     # (F, 2)
    face_center: np.ndarray     # (F, 2)
    face_length: np.ndarray     # (F,)
    side_face: np.ndarray       # (N, 4), boundary face id per side or -1

    @property
    def n_cells(self) -> int:
        return len(self.centers)

    @property
    def n_faces(self) -> int:
        return len(self.face_cell)

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    @property
    def area(self) -> float:
        return self.n_cells * self.cell_area

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def boundary_faces(self) -> list[tuple[int, np.ndarray, np.ndarray, float]]:
        return [
            (int(c), self.face_normal[f], self.face_center[f], float(self.face_length[f]))
            for f, c in enumerate(self.face_cell)
        ]

    def face_angles(self) -> np.ndarray:
        """Polar angle of every boundary face center, in [0, 2*pi)."""
        return np.mod(np.arctan2(self.face_center[:, 1], self.face_center[:, 0]), 2.0 * np.pi)

    def to_image(self, field: np.ndarray) -> np.ndarray:
        """Scatter a per-cell field into an (n, n) array, NaN outside the disk."""
        image = np.full((self.n, self.n), np.nan)
        image[self.interior_mask] = field
        return image


@dataclass(frozen=True, eq=False)
class AngularQuadrature:
    """Equally weighted directions on the unit circle, normalised to total weight one"""
    angles: np.ndarray
    directions: np.ndarray  # (K, 2)
    weights: np.ndarray     # (K,)

    @property
    def n_dir(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class ParameterPair:
    """Cell-wise absorption and scattering coefficients (mm^-1) with box bounds"""
    mu: np.ndarray
    sigma: np.ndarray
    mu_max: float
    sigma_max: float

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        sigma = np.array(self.sigma, dtype=float)
        if mu.ndim != 1 or mu.shape != sigma.shape:
            raise GeometryError(f"mu and sigma must be 1-D arrays of equal length, got {mu.shape} and {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise GeometryError("mu and sigma must be finite")
        if self.mu_max < 0 or self.sigma_max < 0:
            raise GeometryError("parameter bounds must be non-negative")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "sigma", _frozen(sigma))

    @classmethod
    def constant(cls, grid: SpatialGrid, mu: float, sigma: float, mu_max: float, sigma_max: float) -> "ParameterPair":
        return cls(np.full(grid.n_cells, mu), np.full(grid.n_cells, sigma), mu_max, sigma_max)

    @property
    def mu_bounds(self) -> tuple[float, float]:
        return (0.0, self.mu_max)

    @property
    def sigma_bounds(self) -> tuple[float, float]:
        return (0.0, self.sigma_max)

    @property
    def n_cells(self) -> int:
        return len(self.mu)

    def vector(self) -> np.ndarray:
        """The optimisation variable x = (mu, sigma) as one flat array."""
        return np.concatenate([self.mu, self.sigma])

    @classmethod
    def from_vector(cls, x: np.ndarray, mu_max: float, sigma_max: float) -> "ParameterPair":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or len(x) % 2:
            raise GeometryError(f"parameter vector must be 1-D with even length, got shape {x.shape}")
        n = len(x) // 2
        return cls(x[:n], x[n:], mu_max, sigma_max)

    def with_vector(self, x: np.ndarray) -> "ParameterPair":
        """Same bounds, new values."""
        return ParameterPair.from_vector(x, self.mu_max, self.sigma_max)

    def is_admissible(self, slack: float = 1e-12) -> bool:
        return bool(
            np.all(self.mu >= -slack) and np.all(self.mu <= self.mu_max * (1 + slack) + slack)
            and np.all(self.sigma >= -slack) and np.all(self.sigma <= self.sigma_max * (1 + slack) + slack)
        )

    def check_admissible(self) -> None:
        if not self.is_admissible():
            raise GeometryError(
                f"parameters outside D(S): mu in [{self.mu.min():.4g}, {self.mu.max():.4g}] "
                f"(bound {self.mu_max:.4g}), sigma in [{self.sigma.min():.4g}, {self.sigma.max():.4g}] "
                f"(bound {self.sigma_max:.4g})"
            )


@dataclass(frozen=True, eq=False)
class AngularFlux:
    """Particle density sampled per (cell, direction)"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise GeometryError(f"angular flux must be 2-D (cells, directions), got shape {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, grid: SpatialGrid, quad: AngularQuadrature) -> "AngularFlux":
        return cls(np.zeros((grid.n_cells, quad.n_dir)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def scalar_flux(self, quad: AngularQuadrature) -> np.ndarray:
        return _average(self.values, quad)

    def __add__(self, other: "AngularFlux") -> "AngularFlux":
        return AngularFlux(self.values + other.values)

    def __sub__(self, other: "AngularFlux") -> "AngularFlux":
        return AngularFlux(self.values - other.values)

    def __mul__(self, scale: float) -> "AngularFlux":
        return AngularFlux(scale * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "AngularFlux":
        return AngularFlux(-self.values)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Values on boundary (face, direction) pairs, defined on the inflow or the outflow set"""
    values: np.ndarray  # (F, K), zero off the defining set
    mask: np.ndarray    # (F, K)
    side: Literal["inflow", "outflow"]

    def __post_init__(self):
        values = np.where(self.mask, np.array(self.values, dtype=float), 0.0)
        object.__setattr__(self, "values", _frozen(values))

FluxLike = Union[AngularFlux, np.ndarray]


class SolverOptions(BaseModel):
    """Forward solver controls"""
    rtol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=10_000, ge=1)
    method: Literal["iterative", "direct"] = "iterative"
    krylov_threshold: float = Field(default=0.5, ge=0, le=1)
    gmres_restart: int = Field(default=50, ge=1)

# ----------------------------------------------
# Geometry

def build_grid(n: int, radius: float) -> SpatialGrid:
    if n < 4:
        raise GeometryError(f"grid needs at least 4 cells per axis, got n={n}")
    if radius <= 0:
        raise GeometryError(f"disk radius must be positive, got {radius}")

    h = 2.0 * radius / n
    coords = -radius + (np.arange(n) + 0.5) * h
    xx, yy = np.meshgrid(coords, coords)
    mask = xx ** 2 + yy ** 2 <= radius ** 2
    if not mask.any():
        raise GeometryError("disk mask selects no cells")

    cell_index = np.full((n, n), -1, dtype=int)
    cell_index[mask] = np.arange(int(mask.sum()))
    rows, cols = np.nonzero(mask)
    centers = np.column_stack([xx[mask], yy[mask]])

    neighbors = np.full((len(rows), 4), -1, dtype=int)
    for side, (di, dj) in enumerate(_SIDE_OFFSETS):
        ni, nj = cols + di, rows + dj
        inside = (ni >= 0) & (ni < n) & (nj >= 0) & (nj < n)
        neighbors[inside, side] = cell_index[nj[inside], ni[inside]]

    face_cell, face_side = np.nonzero(neighbors < 0)
    side_face = np.full_like(neighbors, -1)
    side_face[face_cell, face_side] = np.arange(len(face_cell))
    face_normal = FACE_NORMALS[face_side]

    return SpatialGrid(
        n=n,
        h=h,
        radius=float(radius),
        interior_mask=_frozen(mask),
        cell_index=_frozen(cell_index),
        centers=_frozen(centers),
        neighbors=_frozen(neighbors),
        face_cell=_frozen(face_cell),
        face_side=_frozen(face_side),
        face_normal=_frozen(face_normal.copy()),
        face_center=_frozen(centers[face_cell] + 0.5 * h * face_normal),
        face_length=_frozen(np.full(len(face_cell), h)),
        side_face=_frozen(side_face),
    )


def build_quadrature(n_dir: int) -> AngularQuadrature:
    # the half offset keeps every direction off the grid axes, so s.n never vanishes
    if n_dir < 4 or n_dir % 2:
        raise GeometryError(f"n_dir must be an even number >= 4, got {n_dir}")
    angles = 2.0 * np.pi * (np.arange(n_dir) + 0.5) / n_dir
    directions = np.column_stack([np.cos(angles), np.sin(angles)])
    return AngularQuadrature(
        angles=_frozen(angles),
        directions=_frozen(directions),
        weights=_frozen(np.full(n_dir, 1.0 / n_dir)),
    )


def normal_components(grid: SpatialGrid, quad: AngularQuadrature) -> np.ndarray:
    """s_k . n(r) for every boundary face and direction, shape (F, K)."""
    return grid.face_normal @ quad.directions.T


@lru_cache(maxsize=16)
def shadowed_mask(grid: SpatialGrid, quad: AngularQuadrature) -> np.ndarray:
    """(F, K) pairs where s_k enters a staircase step face but leaves the disk there.

    Such a face lies downstream of the circle, so its upwind value is the cell's
    own value instead of inflow data. A cell that no other face feeds in
    direction k keeps its step faces on the inflow set.
    """
    leaving = (grid.face_center / np.linalg.norm(grid.face_center, axis=1)[:, None]) @ quad.directions.T >= 0
    candidate = (normal_components(grid, quad) < 0) & leaving
    per_side = np.zeros((grid.n_cells, 4, quad.n_dir), dtype=bool)
    per_side[grid.face_cell, grid.face_side] = candidate
    incoming = (FACE_NORMALS @ quad.directions.T < 0)[None, :, :]
    fed = np.any(incoming & ~per_side, axis=1)
    return _frozen(candidate & fed[grid.face_cell])


def inflow_mask(grid: SpatialGrid, quad: AngularQuadrature) -> np.ndarray:
    return (normal_components(grid, quad) < 0) & ~shadowed_mask(grid, quad)


def outflow_mask(grid: SpatialGrid, quad: AngularQuadrature) -> np.ndarray:
    return normal_components(grid, quad) > 0


def inflow_data(grid: SpatialGrid, quad: AngularQuadrature, values: Union[float, np.ndarray] = 0.0) -> BoundaryData:
    """Boundary data g on the discrete inflow set; a scalar means a constant."""
    full = np.broadcast_to(np.asarray(values, dtype=float), (grid.n_faces, quad.n_dir))
    return BoundaryData(full, inflow_mask(grid, quad), "inflow")


def isotropic_flux(grid: SpatialGrid, quad: AngularQuadrature, field: Union[float, np.ndarray]) -> AngularFlux:
    """Direction-independent angular flux from a per-cell field (or a constant)."""
    field = np.broadcast_to(np.asarray(field, dtype=float), (grid.n_cells,))
    return AngularFlux(np.repeat(field[:, None], quad.n_dir, axis=1))


def exit_distance(points: np.ndarray, direction: np.ndarray, radius: float) -> np.ndarray:
    """Distance from each point back along -direction to the circle of given radius."""
    along = points @ direction
    return along + np.sqrt(np.maximum(along ** 2 - np.sum(points ** 2, axis=1) + radius ** 2, 0.0))

# ----------------------------------------------
# Discrete norms

def _values(x: FluxLike) -> np.ndarray:
    return x.values if isinstance(x, AngularFlux) else np.asarray(x, dtype=float)


def _average(values: np.ndarray, quad: AngularQuadrature) -> np.ndarray:
    return np.sum(values * quad.weights, axis=1)


def l2_inner(u: FluxLike, v: FluxLike, grid: SpatialGrid, quad: AngularQuadrature) -> float:
    """Discrete L2(R x S) inner product: cell area times quadrature weights."""
    return grid.cell_area * float(np.sum(_average(_values(u) * _values(v), quad)))


def l2_norm(u: FluxLike, grid: SpatialGrid, quad: AngularQuadrature) -> float:
    return math.sqrt(max(l2_inner(u, u, grid, quad), 0.0))


def boundary_norm(g: BoundaryData, grid: SpatialGrid, quad: AngularQuadrature) -> float:
    """L2 norm on the boundary with the |s.n| weight."""
    weight = grid.face_length[:, None] * quad.weights[None, :] * np.abs(normal_components(grid, quad))
    return math.sqrt(float(np.sum(weight * np.where(g.mask, g.values, 0.0) ** 2)))

# ----------------------------------------------
# Operators

@dataclass(frozen=True, eq=False)
class TransportStencil:
    """Upwind discretisation of s.grad split into the interior part and the inflow part"""
    streaming: sp.csr_matrix      # (N*K, N*K)
    inflow: sp.csr_matrix         # (N*K, F*K), maps g to its upwind contribution
    blocks: tuple                 # per-direction (N, N) streaming blocks


@lru_cache(maxsize=16)
def transport_stencil(grid: SpatialGrid, quad: AngularQuadrature) -> TransportStencil:
    n_cells, n_dir, h = grid.n_cells, quad.n_dir, grid.h
    cells = np.arange(n_cells)
    side_dot = FACE_NORMALS @ quad.directions.T  # (4, K)
    outflow_rate = np.abs(quad.directions).sum(axis=1) / h
    shadowed = shadowed_mask(grid, quad)

    blocks = []
    rows, cols, vals = [], [], []
    in_rows, in_cols, in_vals = [], [], []
    for k in range(n_dir):
        b_rows, b_cols, b_vals = [cells], [cells], [np.full(n_cells, outflow_rate[k])]
        for side in range(4):
            rate = side_dot[side, k] / h
            if rate >= 0:
                continue
            upwind = grid.neighbors[:, side]
            interior = upwind >= 0
            b_rows.append(cells[interior])
            b_cols.append(upwind[interior])
            b_vals.append(np.full(int(interior.sum()), rate))
            faces = grid.side_face[~interior, side]
            shadow = shadowed[faces, k]
            # step faces downstream of the circle take the cell value as ghost value
            b_rows.append(cells[~interior][shadow])
            b_cols.append(cells[~interior][shadow])
            b_vals.append(np.full(int(shadow.sum()), rate))
            in_rows.append(cells[~interior][~shadow] * n_dir + k)
            in_cols.append(faces[~shadow] * n_dir + k)
            in_vals.append(np.full(int((~shadow).sum()), -rate))
        b_rows, b_cols, b_vals = map(np.concatenate, (b_rows, b_cols, b_vals))
        blocks.append(sp.csc_matrix((b_vals, (b_rows, b_cols)), shape=(n_cells, n_cells)))
        rows.append(b_rows * n_dir + k)
        cols.append(b_cols * n_dir + k)
        vals.append(b_vals)

    size = n_cells * n_dir
    streaming = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    inflow = sp.csr_matrix(
        (np.concatenate(in_vals), (np.concatenate(in_rows), np.concatenate(in_cols))),
        shape=(size, grid.n_faces * n_dir))
    return TransportStencil(streaming=streaming, inflow=inflow, blocks=tuple(blocks))


def collision_matrix(params: ParameterPair, quad: AngularQuadrature) -> sp.csr_matrix:
    """Sparse matrix of C = mu I + sigma (I - Theta) in the flattened layout."""
    n_dir = quad.n_dir
    diagonal = sp.kron(sp.diags(params.mu + params.sigma), sp.identity(n_dir))
    averaging = sp.csr_matrix(np.outer(np.ones(n_dir), quad.weights))
    return (diagonal - sp.kron(sp.diags(params.sigma), averaging)).tocsr()


def _check_flux(phi: AngularFlux, grid: SpatialGrid, quad: AngularQuadrature) -> None:
    if phi.shape != (grid.n_cells, quad.n_dir):
        raise GeometryError(f"flux shape {phi.shape} does not match grid/quadrature ({grid.n_cells}, {quad.n_dir})")


def _check_boundary(g: BoundaryData, grid: SpatialGrid, quad: AngularQuadrature) -> None:
    if g.values.shape != (grid.n_faces, quad.n_dir):
        raise GeometryError(f"boundary data shape {g.values.shape} does not match ({grid.n_faces}, {quad.n_dir})")


def apply_theta(phi: AngularFlux, quad: AngularQuadrature) -> AngularFlux:
    if phi.shape[1] != quad.n_dir:
        raise GeometryError(f"flux has {phi.shape[1]} directions, quadrature has {quad.n_dir}")
    average = _average(phi.values, quad)
    return AngularFlux(np.repeat(average[:, None], quad.n_dir, axis=1))


def apply_collision(phi: AngularFlux, params: ParameterPair, quad: Optional[AngularQuadrature] = None) -> AngularFlux:
    n_cells, n_dir = phi.shape
    if params.n_cells != n_cells:
        raise GeometryError(f"parameters have {params.n_cells} cells, flux has {n_cells}")
    quad = quad or build_quadrature(n_dir)
    theta = apply_theta(phi, quad).values
    values = params.mu[:, None] * phi.values + params.sigma[:, None] * (phi.values - theta)
    return AngularFlux(values)


def apply_transport(phi: AngularFlux, g: BoundaryData, grid: SpatialGrid, quad: AngularQuadrature) -> AngularFlux:
    _check_flux(phi, grid, quad)
    _check_boundary(g, grid, quad)
    stencil = transport_stencil(grid, quad)
    values = stencil.streaming @ phi.values.ravel() - stencil.inflow @ g.values.ravel()
    return AngularFlux(values.reshape(phi.shape))


def outflow_trace(phi: AngularFlux, grid: SpatialGrid, quad: AngularQuadrature) -> BoundaryData:
    _check_flux(phi, grid, quad)
    return BoundaryData(phi.values[grid.face_cell], outflow_mask(grid, quad), "outflow")


def residual_norm(
    phi: AngularFlux,
    params: ParameterPair,
    f: Optional[AngularFlux],
    g: BoundaryData,
    grid: SpatialGrid,
    quad: AngularQuadrature
) -> float:
    """Discrete L2 norm of A phi + C phi - f."""
    residual = apply_transport(phi, g, grid, quad).values + apply_collision(phi, params, quad).values
    if f is not None:
        residual = residual - f.values
    return l2_norm(residual, grid, quad)

# ----------------------------------------------
# Solvers

class TransportSystem:
    """Assembled A + C(mu, sigma) over all (cell, direction) unknowns with its LU factors.

    One factorisation serves every right-hand side at the same parameters, for the
    forward problem as well as for the transposed (adjoint) problem.

    SuperLU solves are not thread-safe, so solves on one system are serialised
    by a lock: JobManager workers sharing a system run their triangular solves
    one at a time, while their assembly and detector work still overlaps.
    Build one system per worker where the solves themselves must run in parallel.
    """

    def __init__(self, params: ParameterPair, grid: SpatialGrid, quad: AngularQuadrature):
        if params.n_cells != grid.n_cells:
            raise GeometryError(f"parameters have {params.n_cells} cells, grid has {grid.n_cells}")
        self.params = params
        self.grid = grid
        self.quad = quad
        self.stencil = transport_stencil(grid, quad)
        self.matrix = (self.stencil.streaming + collision_matrix(params, quad)).tocsc()
        self._lu = spla.splu(self.matrix)
        self._lock = threading.Lock()

    def source_vector(self, f: Optional[AngularFlux], g: Optional[BoundaryData]) -> np.ndarray:
        rhs = np.zeros(self.matrix.shape[0])
        if f is not None:
            _check_flux(f, self.grid, self.quad)
            rhs += f.values.ravel()
        if g is not None:
            _check_boundary(g, self.grid, self.quad)
            rhs += self.stencil.inflow @ g.values.ravel()
        return rhs

    def solve_values(self, rhs: np.ndarray) -> np.ndarray:
        shape = (self.grid.n_cells, self.quad.n_dir)
        with self._lock:
            return self._lu.solve(np.ascontiguousarray(rhs.ravel())).reshape(shape)

    def solve_transpose_values(self, rhs: np.ndarray) -> np.ndarray:
        shape = (self.grid.n_cells, self.quad.n_dir)
        with self._lock:
            return self._lu.solve(np.ascontiguousarray(rhs.ravel()), trans="T").reshape(shape)

    def solve(self, f: Optional[AngularFlux], g: Optional[BoundaryData]) -> AngularFlux:
        return AngularFlux(self.solve_values(self.source_vector(f, g)))


def solve_forward(
    params: ParameterPair,
    f: Optional[AngularFlux],
    g: Optional[BoundaryData],
    grid: SpatialGrid,
    quad: AngularQuadrature,
    options: Optional[SolverOptions] = None,
    system: Optional[TransportSystem] = None
) -> AngularFlux:
    """Solve A phi + C phi = f in R x S, phi = g on the inflow boundary.

    f=None means no volume source and g=None means zero inflow. A prebuilt
    TransportSystem at the same parameters may be passed to reuse its factors.
    """
    options = options or SolverOptions()
    params.check_admissible()
    if params.n_cells != grid.n_cells:
        raise GeometryError(f"parameters have {params.n_cells} cells, grid has {grid.n_cells}")
    f = f if f is not None else AngularFlux.zeros(grid, quad)
    g = g if g is not None else inflow_data(grid, quad, 0.0)
    _check_flux(f, grid, quad)
    _check_boundary(g, grid, quad)
    target = options.rtol * (l2_norm(f, grid, quad) + boundary_norm(g, grid, quad))

    if system is not None or options.method == "direct":
        system = system or TransportSystem(params, grid, quad)
        phi = system.solve(f, g)
        achieved = residual_norm(phi, params, f, g, grid, quad)
        if achieved > target and achieved > 1e3 * np.finfo(float).eps * (1.0 + l2_norm(phi, grid, quad)):
            raise SolverError("direct transport solve lost accuracy", achieved_residual=achieved)
        return phi
    return _solve_by_sweeps(params, f, g, grid, quad, options, target)


def _solve_by_sweeps(
    params: ParameterPair,
    f: AngularFlux,
    g: BoundaryData,
    grid: SpatialGrid,
    quad: AngularQuadrature,
    options: SolverOptions,
    target: float
) -> AngularFlux:
    stencil = transport_stencil(grid, quad)
    n_cells, n_dir = grid.n_cells, quad.n_dir
    sigma = params.sigma
    total = params.mu + sigma
    sweepers = [spla.splu((stencil.blocks[k] + sp.diags(total)).tocsc()) for k in range(n_dir)]
    fixed_source = f.values + (stencil.inflow @ g.values.ravel()).reshape(n_cells, n_dir)

    def sweep(source: np.ndarray) -> np.ndarray:
        out = np.empty((n_cells, n_dir))
        for k, lu in enumerate(sweepers):
            out[:, k] = lu.solve(np.ascontiguousarray(source[:, k]))
        return out

    def scattering(scalar: np.ndarray) -> np.ndarray:
        return np.repeat((sigma * scalar)[:, None], n_dir, axis=1)

    # residual of the full system after a sweep is sigma * (old - new scalar flux)
    def residual(old: np.ndarray, new: np.ndarray) -> float:
        return grid.h * float(np.linalg.norm(sigma * (old - new)))

    ratio = float(np.max(np.divide(sigma, total, out=np.zeros_like(total), where=total > 0)))
    scalar = np.zeros(n_cells)

    if ratio <= options.krylov_threshold:
        for iteration in range(1, options.max_iter + 1):
            phi = sweep(fixed_source + scattering(scalar))
            new_scalar = _average(phi, quad)
            achieved = residual(scalar, new_scalar)
            scalar = new_scalar
            if achieved <= target:
                logger.debug(f"Source iteration converged in {iteration} sweeps (residual {achieved:.3e})")
                return AngularFlux(phi)
        raise SolverError(
            "source iteration did not converge; sigma_max * diam may be too large for the tolerance",
            achieved_residual=achieved, iterations=options.max_iter)

    # Krylov acceleration on the scalar-flux fixed point (I - K) Phi = Theta L^-1 q
    base = _average(sweep(fixed_source), quad)
    operator = spla.LinearOperator(
        (n_cells, n_cells),
        matvec=lambda v: np.ravel(v) - _average(sweep(scattering(np.ravel(v))), quad),
        dtype=float)
    counter = {"iterations": 0}

    def count(_):
        counter["iterations"] += 1

    atol = 0.5 * target / (grid.h * float(sigma.max()))
    restart = min(options.gmres_restart, n_cells)
    scalar, info = spla.gmres(
        operator, base, rtol=0.0, atol=atol, restart=restart,
        maxiter=max(1, math.ceil(options.max_iter / restart)),
        callback=count, callback_type="pr_norm")
    phi = sweep(fixed_source + scattering(scalar))
    achieved = residual(scalar, _average(phi, quad))
    logger.debug(f"GMRES on scattering source: {counter['iterations']} iterations, residual {achieved:.3e}")
    if achieved > target:
        raise SolverError(
            "Krylov-accelerated source iteration did not converge; sigma_max * diam may be too large for the tolerance",
            achieved_residual=achieved, iterations=counter["iterations"])
    return AngularFlux(phi)

# ----------------------------------------------
# CSV serialisation

def save_field_csv(field: np.ndarray, grid: SpatialGrid, path: Union[str, Path]) -> Path:
    """One row per grid row, NaN outside the disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, grid.to_image(field), delimiter=",", fmt="%.17g")
    return path


def load_field_csv(path: Union[str, Path], grid: SpatialGrid) -> np.ndarray:
    image = np.loadtxt(path, delimiter=",", ndmin=2)
    if image.shape != (grid.n, grid.n):
        raise GeometryError(f"{path}: expected a {grid.n}x{grid.n} field, got {image.shape}")
    return image[grid.interior_mask]


def save_quadrature_csv(quad: AngularQuadrature, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([quad.angles, quad.weights]), delimiter=",",
               fmt="%.17g", header="angle,weight", comments="")
    return path
