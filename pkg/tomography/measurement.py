# measurement.py
"""Boundary outflow observation, source/detector arcs and the measurement matrix."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
# ----------------------------------------------
from core.errors import FingerprintMismatchError, MeasurementFileError, SolverError
from core.job_manager import JobManager, get_job_manager
from tomography.transport_core import (
    AngularFlux,
    AngularQuadrature,
    BoundaryData,
    ParameterPair,
    SolverOptions,
    SpatialGrid,
    TransportSystem,
    inflow_mask,
    normal_components,
    outflow_trace,
    solve_forward,
)

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# ----------------------------------------------
# Geometry of sources and detectors

class BoundaryArc(BaseModel):
    """Arc of the boundary circle, by center angle and angular width (radians)"""
    model_config = ConfigDict(frozen=True)

    center: float
    width: float = Field(gt=0, le=TWO_PI)

    def contains(self, angles: np.ndarray) -> np.ndarray:
        offset = np.mod(angles - self.center + math.pi, TWO_PI) - math.pi
        return np.abs(offset) <= 0.5 * self.width


class SourceArc(BoundaryArc):
    """Isotropic inflow of constant amplitude over an arc"""
    amplitude: float = Field(default=1.0, ge=0)


def _uniform_centers(count: int, offset: float) -> list[float]:
    spacing = TWO_PI / count
    return [float(np.mod(offset + j * spacing, TWO_PI)) for j in range(count)]


class SourceSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    arcs: tuple[SourceArc, ...] = Field(min_length=1)

    @classmethod
    def uniform(
        cls,
        count: int,
        amplitude: float = 1.0,
        width: Optional[float] = None,
        offset: float = 0.0
    ) -> "SourceSet":
        """Sources at offset + 2*pi*j/count; default width a quarter of the spacing."""
        width = width if width is not None else TWO_PI / count / 4
        return cls(arcs=tuple(
            SourceArc(center=c, width=width, amplitude=amplitude) for c in _uniform_centers(count, offset)))

    def __len__(self) -> int:
        return len(self.arcs)


class DetectorSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    arcs: tuple[BoundaryArc, ...] = Field(min_length=1)

    @classmethod
    def uniform(cls, count: int, width: Optional[float] = None, offset: Optional[float] = None) -> "DetectorSet":
        """Detectors half a spacing after each source position unless an offset is given."""
        spacing = TWO_PI / count
        offset = offset if offset is not None else 0.5 * spacing
        width = width if width is not None else spacing / 4
        return cls(arcs=tuple(BoundaryArc(center=c, width=width) for c in _uniform_centers(count, offset)))

    def __len__(self) -> int:
        return len(self.arcs)


def geometry_fingerprint(grid: SpatialGrid, quad: AngularQuadrature, sources: SourceSet, detectors: DetectorSet) -> str:
    """SHA-256 key of everything a measurement matrix depends on besides the parameters."""
    layout = {
        "n": grid.n,
        "radius": grid.radius,
        "n_dir": quad.n_dir,
        "sources": [arc.model_dump() for arc in sources.arcs],
        "detectors": [arc.model_dump() for arc in detectors.arcs],
    }
    return hashlib.sha256(json.dumps(layout, sort_keys=True).encode("utf-8")).hexdigest()

# ----------------------------------------------
# Observation operator

def source_boundary_data(grid: SpatialGrid, quad: AngularQuadrature, source: SourceArc) -> BoundaryData:
    """g_j: the source amplitude on every inflow direction of the faces inside its arc."""
    on_arc = source.contains(grid.face_angles())
    values = np.zeros((grid.n_faces, quad.n_dir))
    values[on_arc] = source.amplitude
    if not on_arc.any():
        logger.warning(f"Source arc at {source.center:.4f} rad (width {source.width:.4f}) covers no boundary face")
    return BoundaryData(values, inflow_mask(grid, quad), "inflow")


def apply_B(trace: BoundaryData, grid: SpatialGrid, quad: AngularQuadrature) -> np.ndarray:
    """Outflow density per boundary face: sum over s.n > 0 of w_k (s_k.n) phi."""
    sn = normal_components(grid, quad)
    weights = np.where(sn > 0, sn, 0.0) * quad.weights[None, :]
    return np.sum(weights * np.where(trace.mask, trace.values, 0.0), axis=1)


def integrate_detector(b_values: np.ndarray, grid: SpatialGrid, det: BoundaryArc) -> float:
    """Face value times face length, summed over faces whose centers lie on the arc."""
    on_arc = det.contains(grid.face_angles())
    if not on_arc.any():
        logger.warning(f"Detector arc at {det.center:.4f} rad (width {det.width:.4f}) captures no boundary face")
        return 0.0
    return float(np.sum(b_values[on_arc] * grid.face_length[on_arc]))


def detector_functional(grid: SpatialGrid, quad: AngularQuadrature, det: BoundaryArc) -> AngularFlux:
    """Angular field y with <y, phi> in L2(R x S) equal to the detector reading of phi."""
    sn = normal_components(grid, quad)
    on_arc = det.contains(grid.face_angles())
    per_face = np.where(sn > 0, sn, 0.0) * (grid.face_length * on_arc)[:, None]
    y = np.zeros((grid.n_cells, quad.n_dir))
    np.add.at(y, grid.face_cell, per_face)
    return AngularFlux(y / grid.cell_area)

# ----------------------------------------------
# Measurement matrix

@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    """Detector readings, rows = detectors, columns = sources"""
    values: np.ndarray
    fingerprint: str

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise MeasurementFileError(f"measurement matrix must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def vector(self) -> np.ndarray:
        """Row-major flattening, entry (i, j) at i * n_sources + j."""
        return self.values.ravel().copy()


def read_detectors(
    phi: AngularFlux,
    grid: SpatialGrid,
    quad: AngularQuadrature,
    detectors: DetectorSet
) -> np.ndarray:
    b_values = apply_B(outflow_trace(phi, grid, quad), grid, quad)
    return np.array([integrate_detector(b_values, grid, det) for det in detectors.arcs])


def assemble_measurements(
    params: ParameterPair,
    sources: SourceSet,
    detectors: DetectorSet,
    grid: SpatialGrid,
    quad: AngularQuadrature,
    options: Optional[SolverOptions] = None,
    job_manager: Optional[JobManager] = None
) -> MeasurementMatrix:
    """Column j holds the detector readings of the forward solution for source j."""
    options = options or SolverOptions()
    params.check_admissible()
    system = TransportSystem(params, grid, quad) if options.method == "direct" else None
    boundary = [source_boundary_data(grid, quad, arc) for arc in sources.arcs]

    def column(j: int):
        def job() -> np.ndarray:
            try:
                phi = solve_forward(params, None, boundary[j], grid, quad, options, system=system)
            except SolverError as e:
                raise e.with_context(f"source column {j}") from e
            return read_detectors(phi, grid, quad, detectors)
        return job

    columns = (job_manager or get_job_manager()).map([column(j) for j in range(len(sources))])
    values = np.column_stack(columns)
    return MeasurementMatrix(values, geometry_fingerprint(grid, quad, sources, detectors))


def save_measurements(matrix: MeasurementMatrix, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, matrix.values, delimiter=",", fmt="%.17g", header=f"fingerprint={matrix.fingerprint}")
    return path


def load_measurements(
    path: Union[str, Path],
    expected_fingerprint: Optional[str] = None,
    expected_shape: Optional[tuple[int, int]] = None
) -> MeasurementMatrix:
    path = Path(path)
    if not path.is_file():
        raise MeasurementFileError(f"measurement file not found: {path}")

    with path.open() as handle:
        header = handle.readline().strip()
    if not header.startswith("# fingerprint="):
        raise MeasurementFileError(f"{path}: missing '# fingerprint=' header line")
    fingerprint = header.split("=", 1)[1].strip()
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: geometry fingerprint {fingerprint[:12]}... does not match "
            f"the configured geometry {expected_fingerprint[:12]}..."
        )

    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise MeasurementFileError(f"{path}: malformed measurement rows: {e}") from e
    if expected_shape is not None and values.shape != tuple(expected_shape):
        raise MeasurementFileError(f"{path}: expected a {expected_shape[0]}x{expected_shape[1]} matrix, got {values.shape}")
    return MeasurementMatrix(values, fingerprint)
