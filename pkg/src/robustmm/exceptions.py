"""Exception hierarchy shared across the package."""


class RobustmmError(Exception):
    """Base class for all package-specific errors."""


class DomainError(RobustmmError, ValueError):
    """Raised when an input value is outside the mathematical domain
    (non-finite data, invalid evaluation point)."""


class ConvergenceError(RobustmmError, RuntimeError):
    """Raised when an iterative solver hits its iteration cap.

    Carries the best information available at failure time: ``bracket``
    for root finders, ``last`` for descent iterations.
    """

    def __init__(self, message, bracket=None, last=None):
        super().__init__(message)
        self.bracket = bracket
        self.last = last


class FitError(RobustmmError, RuntimeError):
    """Raised when an estimator cannot produce any candidate solution
    (for example, every elemental subsample was singular)."""


class SingularityError(RobustmmError, RuntimeError):
    """Raised when a plug-in constant or matrix required for inference is
    numerically singular. ``factor`` names the offending quantity."""

    def __init__(self, message, factor=None):
        super().__init__(message)
        self.factor = factor


class ScenarioError(RobustmmError, ValueError):
    """Raised for malformed simulation scenario files. ``key`` holds the
    offending configuration key when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
