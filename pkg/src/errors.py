"""
Errors Module
Exception hierarchy shared by the managers, processors and the command line.
"""

from typing import Optional


class CorticalThicknessError(Exception):
    """Base class for all errors raised by this package"""


class UsageError(CorticalThicknessError):
    """Bad command line usage (exit code 1)"""


class DataError(CorticalThicknessError):
    """Bad input data (exit code 2)

    Args:
        message: Human readable description
        path: Offending file, if any
        field: Offending field or key, if any
    """

    def __init__(self, message: str, path: Optional[str] = None, field: Optional[str] = None):
        self.path = path
        self.field = field
        prefix = ""
        if path:
            prefix += f"{path}: "
        if field:
            prefix += f"[{field}] "
        super().__init__(prefix + message)


class ConfigError(DataError):
    """Run configuration does not match the schema"""


class OutOfBoundsError(DataError):
    """A sample point lies outside the volume grid"""


class AlreadyCalibratedError(DataError):
    """Density calibration applied to an already calibrated volume"""


class InsufficientRegionError(DataError):
    """Not enough in-region vertices for the requested patch count"""


class EmptyPatchError(DataError):
    """All (or too many) profiles of a patch were dropped"""


class FitDivergedError(DataError):
    """No MTF fit start beat the constant-model baseline"""


class NotPositiveDefiniteError(DataError):
    """Profile noise covariance could not be factorized"""


class DegenerateWeightsError(DataError):
    """Importance weights collapsed onto fewer than two samples"""

    def __init__(self, message: str, ess: float = 0.0):
        self.ess = ess
        super().__init__(message)


class NoPatchSucceededError(DataError):
    """Every patch of a specimen failed"""


class LengthMismatchError(DataError):
    """Estimate and reference lists differ in length"""
