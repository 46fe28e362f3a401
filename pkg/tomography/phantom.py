# phantom.py
"""Piecewise-constant parameter fields: a background plus circular inclusions."""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
# ----------------------------------------------
from tomography.transport_core import ParameterPair, SpatialGrid


class Inclusion(BaseModel):
    model_config = ConfigDict(extra="forbid")

    parameter: Literal["mu", "sigma"]
    center: tuple[float, float]
    radius: float = Field(gt=0)
    value: float = Field(ge=0)


def default_inclusions() -> list[Inclusion]:
    # one absorbing and one scattering inclusion per field, inside the 25 mm disk
    return [
        Inclusion(parameter="mu", center=(-9.0, 6.0), radius=6.0, value=0.03),
        Inclusion(parameter="mu", center=(8.0, 9.0), radius=4.0, value=0.005),
        Inclusion(parameter="sigma", center=(7.0, -8.0), radius=7.0, value=25.0),
        Inclusion(parameter="sigma", center=(-6.0, -10.0), radius=4.0, value=5.0),
    ]


def rasterize(grid: SpatialGrid, background: float, inclusions: list[Inclusion], parameter: str) -> np.ndarray:
    """Per-cell field; later inclusions overwrite earlier ones where they overlap."""
    field = np.full(grid.n_cells, float(background))
    for inclusion in inclusions:
        if inclusion.parameter != parameter:
            continue
        offset = grid.centers - np.asarray(inclusion.center)
        field[np.sum(offset ** 2, axis=1) <= inclusion.radius ** 2] = inclusion.value
    return field


def phantom_parameters(
    grid: SpatialGrid,
    mu_background: float,
    sigma_background: float,
    inclusions: list[Inclusion],
    mu_max: float,
    sigma_max: float
) -> ParameterPair:
    return ParameterPair(
        rasterize(grid, mu_background, inclusions, "mu"),
        rasterize(grid, sigma_background, inclusions, "sigma"),
        mu_max,
        sigma_max,
    )
