# errors.py
from typing import Optional


class RteError(Exception):
    """Base exception for transport-tomography errors"""
    pass

class ConfigurationError(RteError):
    """Raised when there's a configuration issue"""
    pass

class GeometryError(RteError, ValueError):
    """Raised for invalid grids, quadratures, parameters or array shapes"""
    pass

class SolverError(RteError):
    """Raised when a linear or nonlinear solve does not reach its tolerance"""

    def __init__(
        self,
        message: str,
        achieved_residual: Optional[float] = None,
        iterations: Optional[int] = None,
        context: Optional[str] = None
    ):
        self.message = message
        self.achieved_residual = achieved_residual
        self.iterations = iterations
        self.context = context
        details = []
        if context:
            details.append(context)
        if achieved_residual is not None:
            details.append(f"achieved residual {achieved_residual:.3e}")
        if iterations is not None:
            details.append(f"after {iterations} iterations")
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))

    def with_context(self, context: str) -> "SolverError":
        """Copy of this error with a location (column, iteration, alpha) prepended."""
        merged = context if not self.context else f"{context}, {self.context}"
        return SolverError(self.message, self.achieved_residual, self.iterations, merged)

class MeasurementFileError(RteError):
    """Raised when a measurement file is missing or malformed"""
    pass

class FingerprintMismatchError(MeasurementFileError):
    """Raised when stored data were produced with a different geometry"""
    pass

class CheckFailure(RteError):
    """Raised when one or more consistency checks fail"""

    def __init__(self, failed: list[str]):
        self.failed = failed
        super().__init__(f"{len(failed)} check(s) failed: {', '.join(failed)}")
