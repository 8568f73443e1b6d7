"""Exception hierarchy shared across the package."""


class ZtrecError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ZtrecError, ValueError):
    """Invalid configuration or declaration."""


class DomainError(ZtrecError, ValueError):
    """Argument outside the domain of an operation."""


class SchemaError(ConfigurationError):
    """Input file does not conform to its schema."""


class NumericalError(ZtrecError, ArithmeticError):
    """Base class for numerical failures."""


class InsufficientDataError(NumericalError):
    """No kernel-weighted events are available for an age point."""


class RankDeficiencyError(NumericalError):
    """The score Jacobian is singular, so the coefficients are not identifiable."""


class ConvergenceError(NumericalError):
    """An iterative solver did not reach its tolerance."""


class DegenerateProbabilityError(NumericalError):
    """A conditional stratum probability has a zero denominator."""


class UnsupportedRuleError(ZtrecError, NotImplementedError):
    """The stratification rule has no implementation for this operation."""


class FitError(NumericalError):
    """The whole fit failed, e.g. every grid point was unusable."""


class DivergenceError(FitError):
    """The alternating algorithm diverged."""
