"""
Structured errors raised across the toolkit.

Every error derives from ValueError so callers that only guard against
invalid input keep working.
"""

from typing import Any, Optional, Tuple


class OfflineRLError(ValueError):
    """Base class for all toolkit errors"""


class DimensionMismatchError(OfflineRLError):
    def __init__(self, axis: str, expected: Any, actual: Any):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        super().__init__(f"Dimension mismatch on '{axis}': expected {expected}, got {actual}")


class InvalidModelError(OfflineRLError):
    """A table violates its probability or range invariants at the given coordinates"""

    def __init__(self, message: str, coordinates: Optional[Tuple[int, ...]] = None):
        self.coordinates = coordinates
        if coordinates is not None:
            message = f"{message} at {coordinates}"
        super().__init__(message)


class InvalidDistributionError(OfflineRLError):
    pass


class InvalidParameterError(OfflineRLError):
    def __init__(self, name: str, value: Any, bound: str):
        self.name = name
        self.value = value
        self.bound = bound
        super().__init__(f"Invalid parameter {name}={value}: required {bound}")


class EmptyDatasetError(OfflineRLError):
    pass


class EmptyVersionSpaceError(OfflineRLError):
    pass


class InconsistentClassError(OfflineRLError):
    """Every member of the model class assigns zero likelihood to the data"""


class CalibrationError(OfflineRLError):
    def __init__(self, message: str, max_coverage: float):
        self.max_coverage = max_coverage
        super().__init__(f"{message} (max coverage achieved: {max_coverage:.3f})")


class ConfigError(OfflineRLError):
    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"Config error at '{key_path}': {message}")
