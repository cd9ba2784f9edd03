"""Shared exception types.

Every contract violation in the package maps onto one of these classes, so
tests (and callers) can distinguish a shape mismatch from a bad
hyperparameter from a numeric blow-up without parsing messages.
"""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """A configuration value or hyperparameter is outside its legal range."""


class RangeError(IndexError):
    """A position, step, or token id falls outside the addressable range."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; the message names the operation."""


class DivergenceError(RuntimeError):
    """Training aborted on non-finite gradients; carries recent-loss context."""
