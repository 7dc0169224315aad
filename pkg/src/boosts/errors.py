"""Exception hierarchy shared by every module of the package."""


class BoostSError(Exception):
    """Base class for all errors raised by this package."""


# -- input / validation -------------------------------------------------------

class ValidationError(BoostSError, ValueError):
    """An argument or object violates a documented invariant."""


class SchemaError(ValidationError):
    """A required CSV column is missing."""


class ParseError(ValidationError):
    """A CSV cell could not be parsed as a number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DuplicateCoordinateError(ValidationError):
    """Two samples share identical spatial coordinates."""

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


class PartitionError(ValidationError):
    """Leaf index sets overlap or do not cover the training rows."""


class ModelFormatError(BoostSError, ValueError):
    """A serialized model file is malformed."""


class UnsupportedVersionError(ModelFormatError):
    """A serialized model carries a version this code cannot read."""


# -- numerical ----------------------------------------------------------------

class NumericalError(BoostSError, ArithmeticError):
    """Base class for numerical failures."""


class NotSPDError(NumericalError):
    """A matrix that must be symmetric positive definite is not."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class VariogramError(NumericalError):
    """Not enough pairs to form an empirical semivariogram."""


class VariogramFitError(NumericalError):
    """Every multistart of the variogram fit failed to improve."""

    def __init__(self, message, best_params=None):
        super().__init__(message)
        self.best_params = best_params


class DegenerateKernelError(NumericalError):
    """All LWMLR kernel weights underflow for some location."""

    def __init__(self, message, row):
        super().__init__(message)
        self.row = row


class RankDeficientError(NumericalError):
    """A regression design matrix does not have full column rank."""


class LeafSolveError(NumericalError):
    """The leaf-weight linear system is singular or indefinite."""

    def __init__(self, message, smallest_pivot=None):
        super().__init__(message)
        self.smallest_pivot = smallest_pivot


class DegenerateTestError(NumericalError):
    """A signed-rank test received only zero differences."""
