#test_acceptance.py
"""Desk-scale twin experiments on the shipped configuration. Run with `pytest -m slow`."""
from pathlib import Path

import numpy as np
import pytest

from tomography.config import load_config
from tomography.experiments import RateTable, cmd_calibrate, cmd_check, cmd_pgn, cmd_rates

pytestmark = pytest.mark.slow

SHIPPED = Path(__file__).resolve().parents[2] / "experiment_config.yaml"


@pytest.fixture(scope="module")
def config():
    return load_config(SHIPPED)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="module")
def calibration(config, workdir):
    return cmd_calibrate(config, workdir)


@pytest.mark.parametrize("seed", [0, 9])
def test_checks_pass_at_desk_scale(config, workdir, seed):
    report = cmd_check(config.model_copy(update={"seed": seed}), workdir / f"check_{seed}")
    assert report.passed, report.failed


def test_calibration_fits_the_phantom(calibration, config):
    assert calibration.records[-1].alpha == config.regularization.alpha_min
    assert calibration.misfit <= 1e-3
    main, other = calibration.prior_runs[0], calibration.prior_runs[1]
    # distinct minimisers with comparable misfits
    assert other.h1_distance > 10 * config.regularization.step_tol
    assert max(main.misfit, other.misfit) <= 2 * max(min(main.misfit, other.misfit), 1e-12)


def test_rates_in_alpha(config, workdir):
    table = cmd_rates(config, workdir)
    window = RateTable.from_rows([row for row in table.rows if row.alpha <= 1e-2])
    assert 0.35 <= window.err_slope <= 0.65
    assert 0.7 <= window.res_slope <= 1.1
    assert table.err_monotone()


def test_pgn_converges_linearly_at_fixed_alpha(calibration, config, workdir):
    study = cmd_pgn(config, workdir, alpha=1e-5)
    assert study.rho <= 0.9
    burn_in = next(r.n for r in study.records if r.alpha <= 1e-5)
    tail = study.errors[burn_in:]
    assert np.all(np.diff(tail) <= 0)
    residuals = np.array([r.res for r in study.records])
    assert np.all(np.diff(residuals[burn_in:]) <= 1e-12 * residuals[0])
    assert residuals[-1] > 0
    values = np.array([r.tikhonov for r in study.records[burn_in:]])
    assert np.all(np.diff(values) <= 1e-12 * values[0])
