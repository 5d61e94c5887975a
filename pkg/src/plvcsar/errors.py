"""Exception hierarchy shared by all modules."""


class PlvcsarError(Exception):
    """Base class for package errors."""


class ParameterDomainError(PlvcsarError, ValueError):
    """A scalar parameter is outside its admissible range."""


class DimensionError(PlvcsarError, ValueError):
    """Array shapes do not agree."""


class DegenerateDesignError(PlvcsarError):
    """A design matrix is rank deficient or otherwise unusable."""


class DegenerateSupportError(PlvcsarError):
    """The smoothing variable has too few distinct values to place knots."""


class UnusableInstrumentsError(DegenerateDesignError):
    """The instrument block carries no usable variation."""


class SolverError(PlvcsarError):
    """The interior-point solver failed to converge.

    Attributes
    ----------
    diagnostics : dict
        Last iterate summary (iteration count, duality gap, step lengths).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SingularMatrixError(PlvcsarError):
    """A matrix that must be inverted is numerically singular."""

    def __init__(self, message, condition_number=float("inf")):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class DgpError(PlvcsarError):
    """The data-generating process cannot be solved for y."""


class HarnessError(PlvcsarError):
    """Too many Monte Carlo replicates failed."""
