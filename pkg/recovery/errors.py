"""
Error taxonomy for the anomaly-generation pipeline
Every failure surfaced by a command carries one ErrorCategory
"""
from enum import Enum
from typing import Optional


class ErrorCategory(Enum):
    """Error categories for handling"""
    RANGE = "range"
    DIMENSION = "dimension"
    NUMERIC = "numeric"
    CONFIGURATION = "configuration"
    VALIDATION = "validation"
    LOOKUP = "lookup"
    DATA = "data"
    COMPATIBILITY = "compatibility"
    DIVERGENCE = "divergence"
    FILE_SYSTEM = "file_system"
    UNKNOWN = "unknown"


class SeasError(Exception):
    """Base class for all pipeline errors"""

    category = ErrorCategory.UNKNOWN
    exit_code = 1

    def machine_line(self) -> str:
        """Single-line, machine-parsable description used by the CLI"""
        message = str(self).replace('"', "'").replace('\n', ' ')
        return f'error={type(self).__name__} category={self.category.value} message="{message}"'


class RangeError(SeasError, ValueError):
    category = ErrorCategory.RANGE
    exit_code = 2


class OrderingError(RangeError):
    """Timestep ordering violated (t_to must be below t_from)"""


class DimensionError(SeasError, ValueError):
    category = ErrorCategory.DIMENSION
    exit_code = 3


class NumericError(SeasError, ValueError):
    category = ErrorCategory.NUMERIC
    exit_code = 4


class ConfigurationError(SeasError):
    category = ErrorCategory.CONFIGURATION
    exit_code = 5


class ValidationError(SeasError, ValueError):
    category = ErrorCategory.VALIDATION
    exit_code = 6


class UndefinedMetricError(ValidationError):
    """Ranking metric requested on single-class labels"""


class LookupFailure(SeasError, KeyError):
    category = ErrorCategory.LOOKUP
    exit_code = 7

    def __str__(self) -> str:
        # KeyError quotes its argument
        return str(self.args[0]) if self.args else ''


class DataError(SeasError):
    category = ErrorCategory.DATA
    exit_code = 8


class ManifestParseError(DataError):
    """Corrupt manifest line"""

    def __init__(self, path, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class CompatibilityError(SeasError):
    category = ErrorCategory.COMPATIBILITY
    exit_code = 9


class DivergenceError(SeasError):
    """Non-finite loss during training"""

    category = ErrorCategory.DIVERGENCE
    exit_code = 10

    def __init__(self, step: int, term: str, value: Optional[float] = None):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at step {step} in term {term} (value={value})")


class ExportError(SeasError, OSError):
    category = ErrorCategory.FILE_SYSTEM
    exit_code = 11

    def __init__(self, path, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")

    def __str__(self) -> str:
        return self.args[0] if self.args else ''
