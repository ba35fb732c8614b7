"""Exception types shared across the package."""

from __future__ import annotations


class RegimeCouplerError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RegimeCouplerError, ValueError):
    """An argument or configuration value is outside its documented domain."""


class ShapeError(RegimeCouplerError, ValueError):
    """Two objects that must share a grid or dimension do not."""


class NumericOverflowError(RegimeCouplerError, ArithmeticError):
    """A state value became non-finite."""


class RateBoundError(RegimeCouplerError):
    """A rate row exceeded the declared global rate bound during simulation."""


class DegenerateDirectionError(RegimeCouplerError, ValueError):
    """The reflection direction x - y is numerically zero."""


class ModelFaultError(RegimeCouplerError):
    """A user-supplied model callback raised.

    The offending input is kept on ``inputs`` so it can be reproduced.
    """

    def __init__(self, message: str, inputs: dict | None = None):
        super().__init__(message)
        self.inputs = inputs or {}


class QuadratureError(RegimeCouplerError):
    """An improper integral could not be truncated or did not converge."""
