"""Exception hierarchy shared by all modules."""

from __future__ import annotations

from pathlib import Path


class FactorModelError(Exception):
    """Base class for errors raised deliberately by this package."""


class DataError(FactorModelError, ValueError):
    """Input data violates a file schema or a dataset invariant.

    ``path``, ``line`` and ``field`` locate the offending value when known.
    """

    def __init__(
        self,
        message: str,
        path: str | Path | None = None,
        line: int | None = None,
        field: str | None = None,
    ):
        self.path = None if path is None else Path(path)
        self.line = line
        self.field = field
        location = []
        if path is not None:
            location.append(str(path))
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field {field!r}")
        prefix = ": ".join(location)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class LoadingError(FactorModelError):
    """Style loadings cannot be formed for a date."""


class SolverError(FactorModelError):
    """A cross-sectional regression cannot be solved."""

    def __init__(self, message: str, condition: float | None = None):
        self.condition = condition
        if condition is not None:
            message = f"{message} (condition number {condition:.3g})"
        super().__init__(message)


class EvaluationError(FactorModelError):
    """R² cannot be formed, e.g. because the pooled returns are all zero."""


class PortfolioError(FactorModelError):
    """A portfolio cannot be constructed or backtested as requested."""


class ConfigError(FactorModelError, ValueError):
    """Invalid run configuration or command-line usage."""
