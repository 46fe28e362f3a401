# run_experiments.py
# ----------------------------------------------
import argparse
import logging
import sys
from typing import Optional, Sequence
# ----------------------------------------------
from core.errors import CheckFailure, ConfigurationError, GeometryError, MeasurementFileError, SolverError
from core.settings import configure_logging
from tomography.config import load_config
from tomography.experiments import cmd_calibrate, cmd_check, cmd_forward, cmd_pgn, cmd_rates
# ----------------------------------------------

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_CHECK = 3

logger = logging.getLogger("run_experiments")
# ----------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Transport tomography experiments at desk scale.")
    parser.add_argument("command", choices=["check", "calibrate", "rates", "pgn", "forward"])
    parser.add_argument("--config", default="experiment_config.yaml", help="YAML experiment configuration.")
    parser.add_argument("--out", default=None, help="Output directory (overrides the config and RTE_OUTPUT_DIR).")
    parser.add_argument("--alpha", type=float, default=None, help="Fixed alpha for the pgn study.")
    parser.add_argument("--seed", type=int, default=None, help="Seed for the randomised checks.")
    # negative control for the check command
    parser.add_argument("--break-adjoint", action="store_true", help=argparse.SUPPRESS)
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})

    if args.command == "check":
        report = cmd_check(config, args.out, break_adjoint=args.break_adjoint)
        for result in report.results:
            print(f"{result.name:28s} {result.value: .3e}  {result.threshold:12s} {'ok' if result.passed else 'FAILED'}")
        report.raise_for_failures()
    elif args.command == "calibrate":
        result = cmd_calibrate(config, args.out)
        print(f"relative misfit of x_dagger: {result.misfit:.3e} after {len(result.records)} iterations")
        for prior in result.prior_runs[1:]:
            print(f"prior ({prior.mu0}, {prior.sigma0}): misfit {prior.misfit:.3e}, H1 distance {prior.h1_distance:.3e}")
    elif args.command == "rates":
        table = cmd_rates(config, args.out)
        for row in table.rows:
            print(f"alpha={row.alpha:.1e}  res={row.res:.4e}  err={row.err:.4e}")
        print(f"slopes: res {table.res_slope:.3f}, err {table.err_slope:.3f}")
    elif args.command == "pgn":
        study = cmd_pgn(config, args.out, alpha=args.alpha)
        print(f"alpha={study.alpha:.1e}: {len(study.records)} iterations, tail ratio {study.rho:.3f}")
    elif args.command == "forward":
        dump = cmd_forward(config, args.out)
        print(f"measurement matrix {dump.measurements.shape[0]}x{dump.measurements.shape[1]} written")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        return run(args)
    except (ConfigurationError, GeometryError, MeasurementFileError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except SolverError as e:
        logger.error(f"Solver failure: {e}")
        return EXIT_SOLVER
    except CheckFailure as e:
        logger.error(str(e))
        return EXIT_CHECK
#
# ----------------------------------------------

if __name__ == "__main__":
    sys.exit(main())
# ----------------------------------------------
