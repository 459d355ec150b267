"""Exception types shared across the toolkit."""


class PsgdkitError(Exception):
    """Base class for all toolkit errors."""


class ContractViolationError(PsgdkitError, ValueError):
    """An argument violates an operation's contract (shape, symmetry, range)."""


class NumericInputError(PsgdkitError, ValueError):
    """An input contains non-finite values."""


class NumericEvaluationError(PsgdkitError, ArithmeticError):
    """An evaluation produced non-finite values (loss, gradient, probe)."""


class CapabilityError(PsgdkitError, RuntimeError):
    """A problem lacks a capability the caller requested (e.g. exact Hvp)."""


class DegenerateStateError(PsgdkitError, RuntimeError):
    """A factored preconditioner state became numerically unusable."""


class DegenerateCurvatureError(PsgdkitError, RuntimeError):
    """Observed curvature vanished where a positive value is required."""
