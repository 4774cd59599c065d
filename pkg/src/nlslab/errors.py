"""Exception hierarchy shared by every module of the package."""


class LabError(Exception):
    """Base class for all errors raised by nlslab."""


class ValidationError(LabError, ValueError):
    """Invalid input: bad grid, inadmissible exponents, malformed config."""


class NumericalError(LabError, ArithmeticError):
    """A numerical procedure failed (non-convergence, singular system, blow-up)."""


class ResolventError(NumericalError):
    """Spectral parameter too close to an eigenvalue of the discrete operator."""

    def __init__(self, message, nearest_eigenvalue=None):
        super().__init__(message)
        self.nearest_eigenvalue = nearest_eigenvalue


class ConvergenceError(NumericalError):
    """Iteration stopped without reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BoxTooSmallError(NumericalError):
    """Mass leaked to the edge of the periodic box during a run."""

    def __init__(self, message, suggested_half_length=None):
        super().__init__(message)
        self.suggested_half_length = suggested_half_length
