"""Exception types raised across the package."""


class SWSRError(Exception):
    """Base class for all package-specific errors."""


class DegenerateDomainError(SWSRError, ValueError):
    """Time values do not span an interval (fewer than two distinct values)."""


class DomainError(SWSRError, ValueError):
    """A spline was asked to evaluate outside its boundary knots."""


class SingularDesignError(SWSRError, ValueError):
    """The design matrix is numerically rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InsufficientDataError(SWSRError, ValueError):
    """Not enough observations for the requested fit."""


class DegenerateResidualsError(SWSRError, ValueError):
    """A residual-based quantity (group MSE, MAD scale) is exactly zero."""


class EstimationError(SWSRError, RuntimeError):
    """No candidate model could be fitted."""


class DriftStateError(SWSRError, RuntimeError):
    """A random drift function was evaluated before being realized."""


class ConfigError(SWSRError, ValueError):
    """Invalid experiment configuration or input data file."""
