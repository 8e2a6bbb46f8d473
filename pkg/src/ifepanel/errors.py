"""Exception and warning types shared across the package."""


class PanelValidationError(ValueError):
    """Raised when inputs violate shape, finiteness, or configuration rules."""


class NumericalError(RuntimeError):
    """Raised when a numerical procedure fails beyond recovery."""


class OptimizationError(NumericalError):
    """Raised when no optimizer start produced a usable solution."""

    def __init__(self, message, start_table=None):
        super().__init__(message)
        self.start_table = start_table or []


class SingularMatrixError(NumericalError):
    """Raised when a matrix required to be invertible is singular or ill-conditioned."""


class PanelWarning(UserWarning):
    """Base warning category for diagnostics and numerical caveats."""
