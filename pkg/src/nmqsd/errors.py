"""Exception types shared across the package."""


class NmqsdError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(NmqsdError, ValueError):
    """A parameter or input violates a documented precondition."""


class NumericalError(NmqsdError, ArithmeticError):
    """A numerical procedure failed or hit a documented singularity."""


class QuadratureError(NumericalError):
    """Frequency quadrature did not converge; carries the last two estimates."""

    def __init__(self, message, previous=None, last=None):
        super().__init__(message)
        self.previous = previous
        self.last = last


class KernelNotPSDError(NumericalError):
    """The grid covariance of a kernel has a significantly negative eigenvalue."""

    def __init__(self, message, min_eigenvalue=None, max_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.max_eigenvalue = max_eigenvalue


class SingularNormalizationError(NumericalError):
    """``D(t) = qdot^2 - q qddot`` vanishes, so the closed forms are singular."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class UndefinedCoefficientError(NumericalError):
    """A coefficient series is flagged undefined inside the propagation window."""
