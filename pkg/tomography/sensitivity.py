# sensitivity.py
"""First and second derivatives of the parameter-to-solution map and the
adjoint of the first derivative.

The derivative problems share the operator of the forward problem, so a
ForwardLinearization keeps the assembled system and its LU factors. The adjoint
transposes those exact discrete operators; with the discrete inner products of
transport_core the identity <S'h, y> = <h, S'* y> holds to round-off.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
# ----------------------------------------------
from core.errors import GeometryError
from tomography.transport_core import (
    AngularFlux,
    AngularQuadrature,
    BoundaryData,
    ParameterPair,
    SolverOptions,
    SpatialGrid,
    TransportSystem,
    apply_theta,
    l2_norm,
    solve_forward,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParameterVariation:
    """A direction (hat_mu, hat_sigma) in parameter space; sign is unconstrained"""
    hat_mu: np.ndarray
    hat_sigma: np.ndarray

    def __post_init__(self):
        hat_mu = np.array(self.hat_mu, dtype=float)
        hat_sigma = np.array(self.hat_sigma, dtype=float)
        if hat_mu.ndim != 1 or hat_mu.shape != hat_sigma.shape:
            raise GeometryError(f"variation parts must be 1-D of equal length, got {hat_mu.shape} and {hat_sigma.shape}")
        if not (np.all(np.isfinite(hat_mu)) and np.all(np.isfinite(hat_sigma))):
            raise GeometryError("variation must be finite")
        hat_mu.setflags(write=False)
        hat_sigma.setflags(write=False)
        object.__setattr__(self, "hat_mu", hat_mu)
        object.__setattr__(self, "hat_sigma", hat_sigma)

    @classmethod
    def zeros(cls, n_cells: int) -> "ParameterVariation":
        return cls(np.zeros(n_cells), np.zeros(n_cells))

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "ParameterVariation":
        x = np.asarray(x, dtype=float)
        n = len(x) // 2
        return cls(x[:n], x[n:])

    @property
    def n_cells(self) -> int:
        return len(self.hat_mu)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.hat_mu, self.hat_sigma])

    def inner(self, other: "ParameterVariation", grid: SpatialGrid) -> float:
        """L2(R) x L2(R) inner product."""
        return grid.cell_area * float(self.hat_mu @ other.hat_mu + self.hat_sigma @ other.hat_sigma)

    def norm(self, grid: SpatialGrid) -> float:
        return float(np.sqrt(self.inner(self, grid)))

    def __add__(self, other: "ParameterVariation") -> "ParameterVariation":
        return ParameterVariation(self.hat_mu + other.hat_mu, self.hat_sigma + other.hat_sigma)

    def __sub__(self, other: "ParameterVariation") -> "ParameterVariation":
        return ParameterVariation(self.hat_mu - other.hat_mu, self.hat_sigma - other.hat_sigma)

    def __mul__(self, scale: float) -> "ParameterVariation":
        return ParameterVariation(scale * self.hat_mu, scale * self.hat_sigma)

    __rmul__ = __mul__

    def __neg__(self) -> "ParameterVariation":
        return ParameterVariation(-self.hat_mu, -self.hat_sigma)


@dataclass(frozen=True, eq=False)
class ForwardLinearization:
    """Frozen state (mu, sigma, phi) at which derivatives are taken"""
    base_params: ParameterPair
    base_flux: AngularFlux
    system: TransportSystem
    grid: SpatialGrid
    quad: AngularQuadrature

    @property
    def anisotropic_part(self) -> np.ndarray:
        """phi - Theta phi, the part of the flux that scattering acts on."""
        return self.base_flux.values - apply_theta(self.base_flux, self.quad).values


def linearize(
    params: ParameterPair,
    f: Optional[AngularFlux],
    g: Optional[BoundaryData],
    grid: SpatialGrid,
    quad: AngularQuadrature,
    options: Optional[SolverOptions] = None,
    system: Optional[TransportSystem] = None
) -> ForwardLinearization:
    """Solve the forward problem and keep the factorised operator for derivative solves."""
    params.check_admissible()
    system = system or TransportSystem(params, grid, quad)
    phi = solve_forward(params, f, g, grid, quad, options, system=system)
    return ForwardLinearization(base_params=params, base_flux=phi, system=system, grid=grid, quad=quad)


def linearize_sources(
    params: ParameterPair,
    sources_g: Sequence[BoundaryData],
    grid: SpatialGrid,
    quad: AngularQuadrature,
    options: Optional[SolverOptions] = None
) -> list[ForwardLinearization]:
    """One linearization per inflow datum, all sharing one factorisation."""
    system = TransportSystem(params, grid, quad)
    return [linearize(params, None, g, grid, quad, options, system=system) for g in sources_g]


def _check_variation(lin: ForwardLinearization, var: ParameterVariation) -> None:
    if var.n_cells != lin.grid.n_cells:
        raise GeometryError(f"variation has {var.n_cells} cells, grid has {lin.grid.n_cells}")


def _collision_of(lin: ForwardLinearization, var: ParameterVariation, values: np.ndarray) -> np.ndarray:
    """C(hat_mu, hat_sigma) applied to an angular flux given by its values."""
    average = np.sum(values * lin.quad.weights, axis=1, keepdims=True)
    return var.hat_mu[:, None] * values + var.hat_sigma[:, None] * (values - average)


def apply_jacobian(lin: ForwardLinearization, var: ParameterVariation) -> AngularFlux:
    """w = S'(mu, sigma)[var]: (A + C) w = -C(var) phi with zero inflow."""
    _check_variation(lin, var)
    rhs = -(var.hat_mu[:, None] * lin.base_flux.values + var.hat_sigma[:, None] * lin.anisotropic_part)
    return AngularFlux(lin.system.solve_values(rhs))


def apply_increment(lin: ForwardLinearization, var: ParameterVariation, t: float) -> AngularFlux:
    """S(x + t var) - S(x), solved for directly.

    Subtracting the two forward equations gives (A + C(x + t var)) delta = -t C(var) phi
    with zero inflow, so delta carries no cancellation when t is small.
    """
    _check_variation(lin, var)
    base = lin.base_params
    moved = ParameterPair(base.mu + t * var.hat_mu, base.sigma + t * var.hat_sigma, base.mu_max, base.sigma_max)
    moved.check_admissible()
    rhs = -t * _collision_of(lin, var, lin.base_flux.values)
    return AngularFlux(TransportSystem(moved, lin.grid, lin.quad).solve_values(rhs))


def adjoint_state(lin: ForwardLinearization, y: AngularFlux) -> np.ndarray:
    """Costate z solving (A + C)^T z = W y, W the quadrature weights."""
    if y.shape != lin.base_flux.shape:
        raise GeometryError(f"costate source shape {y.shape} does not match flux shape {lin.base_flux.shape}")
    return lin.system.solve_transpose_values(y.values * lin.quad.weights[None, :])


def adjoint_from_state(lin: ForwardLinearization, z: np.ndarray) -> ParameterVariation:
    """Parameter gradient for a costate; z only depends on the operator, so it may be reused across sources."""
    return ParameterVariation(
        -np.sum(lin.base_flux.values * z, axis=1),
        -np.sum(lin.anisotropic_part * z, axis=1),
    )


def apply_adjoint(lin: ForwardLinearization, y: AngularFlux) -> ParameterVariation:
    """S'(mu, sigma)* y in the L2(R x S) / L2(R) x L2(R) pairing."""
    return adjoint_from_state(lin, adjoint_state(lin, y))


def apply_hessian(lin: ForwardLinearization, var1: ParameterVariation, var2: ParameterVariation) -> AngularFlux:
    """H = S''(mu, sigma)[var1, var2].

    Differentiating the sensitivity problem once more gives
    (A + C) H = -C(var1) w2 - C(var2) w1 with zero inflow.
    """
    _check_variation(lin, var1)
    _check_variation(lin, var2)
    w1 = apply_jacobian(lin, var1).values
    w2 = apply_jacobian(lin, var2).values
    rhs = -(_collision_of(lin, var1, w2) + _collision_of(lin, var2, w1))
    return AngularFlux(lin.system.solve_values(rhs))


def lipschitz_ratio(lin1: ForwardLinearization, lin2: ForwardLinearization, var: ParameterVariation) -> float:
    """||(S'(x1) - S'(x2)) var|| / ||x1 - x2||, with var normalised to unit L2(R) norm."""
    grid = lin1.grid
    var = var * (1.0 / var.norm(grid))
    distance = ParameterVariation(
        lin1.base_params.mu - lin2.base_params.mu,
        lin1.base_params.sigma - lin2.base_params.sigma,
    ).norm(grid)
    if distance == 0:
        raise GeometryError("Lipschitz ratio needs two distinct parameter points")
    difference = apply_jacobian(lin1, var) - apply_jacobian(lin2, var)
    return l2_norm(difference, grid, lin1.quad) / distance
