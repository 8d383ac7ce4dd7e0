"""Exception hierarchy.

Three families map onto the CLI exit codes: argument errors (bad inputs or
parameters), data errors (missing/inconsistent files, insufficient overlap)
and numerical failures (poles, degeneracies, non-convergence).
"""


class SemStereoError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ArgumentError(SemStereoError, ValueError):
    exit_code = 2


class DataError(SemStereoError):
    exit_code = 3


class InsufficientOverlapError(DataError):
    pass


class NumericalError(SemStereoError):
    exit_code = 4


class PoleError(NumericalError):
    """A rational polynomial denominator vanished at the evaluation point."""


class DegeneracyError(NumericalError):
    """Geometry is degenerate (coplanar grid, parallel rays, zero baseline...)."""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ApproximationError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class OutOfBoundsError(NumericalError):
    """Normalized coordinates fall beyond twice the RPC validity bounds."""
