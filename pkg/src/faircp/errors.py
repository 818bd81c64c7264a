"""Exception types shared across the package.

The CLI maps these onto process exit codes, so anything user-facing should
raise one of them rather than a bare Exception.
"""


class FaircpError(Exception):
    """Base class for package errors."""


class ConfigError(FaircpError):
    """Invalid or unparseable configuration (exit code 2)."""


class DataError(FaircpError):
    """Invalid, missing, or malformed data (exit code 3)."""


class TrainingError(FaircpError):
    """Optimization failure: non-finite losses or gradients (exit code 4)."""


class ShapeError(ValueError):
    """Dimension mismatch between arrays."""
