"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation failures exit 1,
numerical failures exit 2, violated mathematical guarantees exit 3.
"""


class EgtError(Exception):
    """Base class for all package errors."""


class ValidationError(EgtError):
    """Malformed inputs: bad shapes, masses that do not sum to one, etc."""


class NumericalError(EgtError):
    """Computations that degenerate at working precision (underflow, NaN)."""


class PropertyViolation(EgtError):
    """A guaranteed mathematical property failed to hold on actual data."""
