"""
Error types raised across the pipeline.

Every domain failure derives from DamageMonitorError so commands can catch the
whole family, log it, and re-raise it with the failing stage attached.
"""
from typing import Optional


class DamageMonitorError(Exception):
    """Base class for all damage-monitor errors"""


class DimensionError(DamageMonitorError):
    """Raster too small, mismatched shapes, or a stack that is not co-registered"""


class ConfigurationError(DamageMonitorError):
    """Invalid or inconsistent configuration"""


class PatchLookupError(DamageMonitorError):
    """Patch id or date not present where it is required"""


class ClassError(DamageMonitorError):
    """Input lacks a class the operation needs (e.g. no positives)"""


class ShapeError(DamageMonitorError):
    """Tensor shape does not match the NetworkSpec"""


class NumericError(DamageMonitorError):
    """Non-finite values, divergence, or an iteration that failed to converge"""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class StateError(DamageMonitorError):
    """Operation called out of order (e.g. backward without a cached forward)"""


class InputError(DamageMonitorError):
    """Missing or empty input data"""


class CollinearityError(DamageMonitorError):
    """Rank-deficient regression design"""

    def __init__(self, message: str, offending_bin: Optional[int] = None):
        super().__init__(message)
        self.offending_bin = offending_bin


class UndefinedPrecisionError(DamageMonitorError):
    """Precision requested with no positive predictions"""


class StageError(DamageMonitorError):
    """A pipeline stage failed; carries the stage name"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class RunLockError(DamageMonitorError):
    """Another run holds the output directory"""
