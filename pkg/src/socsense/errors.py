"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/input problems
(ConfigError, SchemaError, ChannelSetError, ProtocolError, ShapeError)
exit 1, numeric failures (NonFiniteError and subclasses) exit 2.
"""

from __future__ import annotations


class SocsenseError(Exception):
    """Base class for all package errors."""


class ShapeError(SocsenseError):
    """Array dimensions do not line up; the message names both shapes."""


class NonFiniteError(SocsenseError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DivergenceError(NonFiniteError):
    """Training loss became non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class SchemaError(SocsenseError):
    """Input data violates the CSV/manifest schema."""


class ChannelSetError(SocsenseError):
    """Unknown channel-set tag or channels missing from the data."""


class ProtocolError(SocsenseError):
    """A cycling protocol phase cannot be executed; names the phase."""


class ConfigError(SocsenseError):
    """Run configuration is invalid (unknown keys, bad values)."""
