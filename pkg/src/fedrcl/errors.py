"""Exception types raised across the package."""

from __future__ import annotations

from typing import Any


class FedRCLError(Exception):
    """Base class for all package errors."""


class FormatError(FedRCLError):
    """A file does not follow the expected binary or text layout."""


class DataError(FedRCLError):
    """Loaded or generated data violates a dataset invariant."""


class ConfigError(FedRCLError):
    """A configuration is inconsistent, infeasible or has unknown keys."""


class ShapeError(FedRCLError):
    """Array shapes or parameter layouts do not match."""


class UndefinedMetricError(FedRCLError):
    """A metric is undefined for the given input (e.g. all-zero matrix)."""


class NumericalError(FedRCLError):
    """A loss or gradient became non-finite.

    ``payload`` carries whatever diagnostic values were available at the
    point of failure (component losses, round, client id, ...).
    """

    def __init__(self, message: str, payload: dict[str, Any] | None = None):
        super().__init__(message)
        self.payload = dict(payload or {})
