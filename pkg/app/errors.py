"""
Exception hierarchy for spectragraph.

Every error raised by the package derives from SpectraGraphError and from the
built-in exception a caller would naturally catch (ValueError for bad input,
RuntimeError for numeric failures). Each class carries the process exit code
the command line surface reports for it.

Exit codes:
    0: success
    2: configuration error
    3: data / input error
    4: numeric failure
"""

from typing import Optional


class SpectraGraphError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SpectraGraphError, ValueError):
    """Invalid run configuration, flags or config file."""

    exit_code = 2


class InvalidSpecError(ConfigError):
    """A basis or experiment description is not usable."""


class InputError(SpectraGraphError, ValueError):
    """Arguments with inconsistent dimensions or malformed structure."""

    exit_code = 3


class DataError(InputError):
    """
    A dataset file could not be parsed.

    Args:
        message: Human readable description
        row: 1-based row of the offending cell, if known
        column: 1-based column of the offending cell, if known
    """

    def __init__(
        self, message: str, row: Optional[int] = None, column: Optional[int] = None
    ):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        if location:
            message = f"{message} (at {', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class TraceError(DataError):
    """Persisted chain traces are missing or corrupt."""


class EmptyChainError(InputError):
    """A posterior summary was requested from a chain without samples."""


class UnsupportedError(InputError):
    """The requested computation is gated off for this problem size."""


class DomainError(SpectraGraphError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""

    exit_code = 4


class NumericError(SpectraGraphError, RuntimeError):
    """An internal numeric failure."""

    exit_code = 4


class ConvergenceError(NumericError):
    """
    An iterative routine did not converge.

    Args:
        message: Human readable description
        residual: Last max-abs change observed before giving up
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class SamplerError(NumericError):
    """
    A numeric failure inside the MCMC loop.

    Args:
        message: Description of the underlying failure
        iteration: 0-based iteration index where the failure happened
    """

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
