"""Exceptions shared by the numeric, model, and optimizer modules."""

from __future__ import annotations


class DimensionError(ValueError):
    """Raised when vector lengths or array shapes do not agree."""


class DomainError(ValueError):
    """Raised when an argument lies outside the domain an operation is defined on."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or infinity is produced or consumed where it is not allowed."""


class StateError(RuntimeError):
    """Raised when an operation is invoked before the state it depends on exists."""
