"""Error hierarchy shared by the library and the command line."""

from __future__ import annotations


class ModeLabError(Exception):
    """Base class for all errors raised by mode-lab."""


class ShapeError(ModeLabError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(ModeLabError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""


class ContractError(ModeLabError, RuntimeError):
    """An operation was called outside of its contract."""


class NumericError(ModeLabError, ArithmeticError):
    """A computation produced a non-finite value."""


class CompositionOverflowError(NumericError, OverflowError):
    """A combinatorial count does not fit the supported integer range."""


class InfeasibleError(ModeLabError):
    """No configuration satisfies the requested constraints."""
