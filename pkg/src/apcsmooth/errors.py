"""Exception hierarchy.

Two families matter to callers: :class:`ValidationError` (bad input, CLI exit
code 2) and :class:`NumericalError` (a fit or optimisation failed, exit 3).
"""


class ApcError(Exception):
    """Base class for all package errors."""


class ValidationError(ApcError, ValueError):
    """Input failed validation."""


class NumericalError(ApcError, ArithmeticError):
    """A numerical routine did not produce a usable answer."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


# dataset
class MissingCell(ValidationError):
    pass


class DuplicateCell(ValidationError):
    pass


class NegativeCount(ValidationError):
    pass


class NonpositiveExposure(ValidationError):
    pass


class RaggedBins(ValidationError):
    pass


class IndivisibleSpan(ValidationError):
    pass


class LogOfZero(ValidationError):
    pass


# design / bases / gmrf
class OutOfRange(ValidationError):
    pass


class TooFewLevels(ValidationError):
    pass


class RankLoss(ValidationError):
    pass


class TooFewKnots(ValidationError):
    pass


class DuplicateValues(ValidationError):
    pass


class TooSmall(ValidationError):
    pass


class NonpositivePrecision(ValidationError):
    pass


# fitting
class Diverged(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class OptimFailed(NumericalError):
    pass


class MissingExposure(ValidationError):
    pass


# scoring / cli
class ShapeMismatch(ValidationError):
    pass


class InvertedInterval(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class MissingInput(ValidationError):
    pass
