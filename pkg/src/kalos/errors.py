"""Exception hierarchy for Kalos.

Every error raised on purpose by the pipeline derives from ``KalosError`` so
the CLI can tell expected failures from bugs. File-system problems keep the
builtin ``FileNotFoundError`` / ``OSError``.
"""


class KalosError(Exception):
    """Base class for all Kalos errors."""


class ConfigError(KalosError, ValueError):
    """Invalid configuration value or unknown configuration key."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class PlyFormatError(KalosError, ValueError):
    """Malformed PLY header or body."""

    def __init__(self, message: str, line_number: int | None = None, line: str | None = None):
        self.line_number = line_number
        self.line = line
        if line_number is not None:
            message = f"line {line_number}: {message} ({line!r})"
        super().__init__(message)


class EmptyCloudError(KalosError, ValueError):
    """A point cloud with zero points reached a stage that needs at least one."""


class ManifestError(KalosError, ValueError):
    """Manifest row failed validation or could not be parsed."""


class ShapeError(KalosError, ValueError):
    """Array or tensor shapes do not agree."""


class UsageError(KalosError, ValueError):
    """An operation was called with arguments that violate its contract."""


class DatasetError(KalosError):
    """The dataset cannot support the requested operation."""


class NumericError(KalosError, ArithmeticError):
    """A numeric operation is undefined for its input (e.g. zero-norm vector)."""


class DivergenceError(KalosError, RuntimeError):
    """Training produced a non-finite loss."""


class UndefinedCorrelationError(KalosError, ArithmeticError):
    """A correlation coefficient is undefined (constant input or too few samples)."""
