"""Exception types shared across the package.

The CLI maps these onto exit codes: precondition violations exit 3,
numerical failures exit 4, I/O problems (plain OSError) exit 2.
"""


class PreconditionError(ValueError):
    """An operation was called with inputs that violate its contract."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (no convergence, singular matrix, ...)."""
