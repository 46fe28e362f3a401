#test_measurement.py
import logging

import numpy as np
import pytest

from core.errors import FingerprintMismatchError, MeasurementFileError
from tomography.measurement import (
    BoundaryArc,
    DetectorSet,
    MeasurementMatrix,
    SourceArc,
    SourceSet,
    apply_B,
    assemble_measurements,
    detector_functional,
    geometry_fingerprint,
    integrate_detector,
    load_measurements,
    read_detectors,
    save_measurements,
    source_boundary_data,
)
from tomography.tests.conftest import DIRECT
from tomography.transport_core import (
    AngularFlux,
    SolverOptions,
    build_grid,
    build_quadrature,
    isotropic_flux,
    l2_inner,
    normal_components,
    outflow_trace,
    solve_forward,
)

# ----------------------------------------------
# Observation operator

def test_B_of_zero(grid, quad):
    trace = outflow_trace(AngularFlux.zeros(grid, quad), grid, quad)
    assert np.all(apply_B(trace, grid, quad) == 0.0)


def test_B_of_one_approaches_one_over_pi(grid):
    quad = build_quadrature(64)
    b = apply_B(outflow_trace(isotropic_flux(grid, quad, 1.0), grid, quad), grid, quad)
    np.testing.assert_allclose(b, b[0], rtol=1e-12)
    assert abs(b[0] - 1.0 / np.pi) < 1e-3


def test_B_of_single_direction(grid, quad):
    k0 = 1
    values = np.zeros((grid.n_cells, quad.n_dir))
    values[:, k0] = 1.0
    b = apply_B(outflow_trace(AngularFlux(values), grid, quad), grid, quad)
    sn = normal_components(grid, quad)[:, k0]
    np.testing.assert_allclose(b, np.where(sn > 0, quad.weights[k0] * sn, 0.0))


def test_detector_counts_faces_on_arc(grid):
    arc = BoundaryArc(center=0.0, width=np.pi / 3)
    on_arc = arc.contains(grid.face_angles())
    assert on_arc.sum() >= 2
    assert integrate_detector(np.ones(grid.n_faces), grid, arc) == pytest.approx(on_arc.sum() * grid.h)
    assert integrate_detector(np.zeros(grid.n_faces), grid, arc) == 0.0


def test_half_circle_reads_the_staircase_length():
    # the staircase half boundary has length 4R, i.e. 4/pi times the half circle
    grid, quad = build_grid(32, 25.0), build_quadrature(64)
    b = apply_B(outflow_trace(isotropic_flux(grid, quad, 1.0), grid, quad), grid, quad)
    arc = BoundaryArc(center=0.0, width=np.pi)
    assert integrate_detector(b, grid, arc) == pytest.approx(4 * grid.radius * b[0], rel=1e-12)
    assert integrate_detector(b, grid, arc) == pytest.approx(4 * grid.radius / np.pi, rel=5e-3)


def test_empty_arc_warns(grid, caplog):
    arc = BoundaryArc(center=0.01, width=1e-4)
    with caplog.at_level(logging.WARNING):
        assert integrate_detector(np.ones(grid.n_faces), grid, arc) == 0.0
    assert "captures no boundary face" in caplog.text


def test_detector_functional_reproduces_reading(grid, quad, rng):
    phi = AngularFlux(rng.standard_normal((grid.n_cells, quad.n_dir)))
    b = apply_B(outflow_trace(phi, grid, quad), grid, quad)
    for center in (0.0, 1.0, 3.5):
        arc = BoundaryArc(center=center, width=np.pi / 3)
        y = detector_functional(grid, quad, arc)
        assert l2_inner(y, phi, grid, quad) == pytest.approx(integrate_detector(b, grid, arc), rel=1e-12, abs=1e-13)

# ----------------------------------------------
# Layouts

def test_uniform_layouts_interleave():
    sources = SourceSet.uniform(8)
    detectors = DetectorSet.uniform(8)
    spacing = 2 * np.pi / 8
    np.testing.assert_allclose([a.center for a in sources.arcs], spacing * np.arange(8))
    np.testing.assert_allclose([a.center for a in detectors.arcs], spacing * (np.arange(8) + 0.5))
    assert sources.arcs[0].width == pytest.approx(spacing / 4)


def test_source_data_lives_on_inflow_faces_of_its_arc(grid, quad):
    arc = SourceArc(center=np.pi, width=np.pi / 2, amplitude=2.5)
    g = source_boundary_data(grid, quad, arc)
    on_arc = arc.contains(grid.face_angles())
    assert np.all(g.values[~on_arc] == 0.0)
    assert np.all(g.values[g.mask & on_arc[:, None]] == 2.5)
    assert np.all(g.values[~g.mask] == 0.0)

# ----------------------------------------------
# Measurement matrix

def test_zero_amplitude_gives_zero_matrix(grid, quad, params, detectors, job_manager):
    sources = SourceSet.uniform(4, amplitude=0.0, width=np.pi / 4)
    matrix = assemble_measurements(params, sources, detectors, grid, quad, DIRECT, job_manager)
    assert matrix.shape == (4, 4)
    assert np.all(matrix.values == 0.0)


def test_sixteen_by_sixteen(grid, quad, params, job_manager):
    matrix = assemble_measurements(
        params, SourceSet.uniform(16, width=0.4), DetectorSet.uniform(16, width=0.4), grid, quad, DIRECT, job_manager)
    assert matrix.shape == (16, 16)


def test_column_matches_standalone_pipeline(grid, quad, params, sources, detectors, job_manager):
    matrix = assemble_measurements(params, sources, detectors, grid, quad, DIRECT, job_manager)
    assert np.all(matrix.values >= 0.0)
    for j, arc in enumerate(sources.arcs):
        phi = solve_forward(params, None, source_boundary_data(grid, quad, arc), grid, quad, DIRECT)
        np.testing.assert_allclose(matrix.values[:, j], read_detectors(phi, grid, quad, detectors), rtol=1e-12)
    again = assemble_measurements(params, sources, detectors, grid, quad, DIRECT, job_manager)
    np.testing.assert_array_equal(again.values, matrix.values)


def test_iterative_and_direct_matrices_agree(grid, quad, params, sources, detectors, job_manager):
    direct = assemble_measurements(params, sources, detectors, grid, quad, DIRECT, job_manager)
    iterative = assemble_measurements(params, sources, detectors, grid, quad, SolverOptions(), job_manager)
    np.testing.assert_allclose(iterative.values, direct.values, rtol=1e-6, atol=1e-8 * direct.values.max())

# ----------------------------------------------
# Persistence

def test_save_load_is_bit_exact(grid, quad, params, sources, detectors, job_manager, tmp_path):
    matrix = assemble_measurements(params, sources, detectors, grid, quad, DIRECT, job_manager)
    path = save_measurements(matrix, tmp_path / "m.csv")
    loaded = load_measurements(path, matrix.fingerprint, (4, 4))
    np.testing.assert_array_equal(loaded.values, matrix.values)
    assert loaded.fingerprint == matrix.fingerprint


def test_load_rejects_other_geometry(grid, sources, detectors, tmp_path):
    stored = geometry_fingerprint(grid, build_quadrature(8), sources, detectors)
    configured = geometry_fingerprint(grid, build_quadrature(12), sources, detectors)
    assert stored != configured
    path = save_measurements(MeasurementMatrix(np.ones((4, 4)), stored), tmp_path / "m.csv")
    with pytest.raises(FingerprintMismatchError):
        load_measurements(path, configured)


def test_load_rejects_wrong_rows(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("# fingerprint=abc\n1,2,3\n4,5,6\n")
    with pytest.raises(MeasurementFileError):
        load_measurements(path, "abc", (3, 3))
    path.write_text("# fingerprint=abc\n1,2,3\n4,5\n")
    with pytest.raises(MeasurementFileError):
        load_measurements(path)


def test_load_missing_file(tmp_path):
    with pytest.raises(MeasurementFileError):
        load_measurements(tmp_path / "absent.csv")
