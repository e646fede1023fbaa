"""Exception and warning types shared across the package."""


class CartanEdsError(Exception):
    """Base class for all package errors."""


class DivisionByZero(CartanEdsError):
    pass


class ZeroDenominatorAfterSubstitution(CartanEdsError):
    pass


class GenericPointExhausted(CartanEdsError):
    pass


class ChartMismatch(CartanEdsError):
    pass


class DegreeZero(CartanEdsError):
    pass


class NoMetric(CartanEdsError):
    pass


class NotSemibasic(CartanEdsError):
    pass


class BadChartLabeling(CartanEdsError):
    pass


class NotSolvable(CartanEdsError):
    pass


class NotIntegralFlag(CartanEdsError):
    pass


class NotCoordinateSolvable(CartanEdsError):
    pass


class BudgetExhausted(CartanEdsError):
    pass


class SyzygyDetected(CartanEdsError):
    pass


class GeneratorNotZ1(CartanEdsError):
    pass


class NotUltralocal(CartanEdsError):
    pass


class TauInvarianceFailed(CartanEdsError):
    pass


class RankMismatch(CartanEdsError):
    """Exact and sampled rank computations disagree."""


class SpecError(CartanEdsError):
    """Base for spec-file diagnostics carrying a source position."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class SpecSyntaxError(SpecError):
    pass


class DegreeMismatch(SpecError):
    pass


class UnresolvedName(SpecError):
    pass


class UnbranchableVariety(UserWarning):
    """A residual polynomial could not be split into simple factors."""


class GenericityWarning(UserWarning):
    """Character values disagreed between generic points and were retried."""


class LeadingDerivativeUnsolvable(UserWarning):
    """A constraint could not be oriented into a substitution rule."""
