"""Exception hierarchy shared across the package."""


class MagflowError(Exception):
    """Base class for all package errors."""


class GeometryError(MagflowError):
    """Metric is not positive definite, or a chart point is invalid."""


class DomainError(MagflowError):
    """Argument outside the domain of an operation (T <= 0, left the plane box...)."""


class NotPeriodicError(MagflowError):
    """Trajectory does not close up within the closure tolerance."""


class ConstantOrbitError(MagflowError):
    """Operation needs a non-constant orbit but the velocity vanishes."""


class AlignmentError(MagflowError):
    """Time shift is not a multiple of the node spacing."""


class PreconditionError(MagflowError):
    """Input does not satisfy the operation's precondition (e.g. loop not critical)."""


class NotUnipotentError(PreconditionError):
    pass


class DegeneracyError(MagflowError):
    """Numerical breakdown inside a linear-algebra construction."""


class BracketError(MagflowError):
    """Inconsistent bracket passed to the critical-value bisection."""


class ConfigError(MagflowError):
    """Malformed run configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
