"""Exception types raised across the package."""


class NompCfarError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NompCfarError, ValueError):
    pass


class DegenerateWindowError(NompCfarError):
    """No eligible reference cell could be collected around a CUT."""


class NumericalFailureError(NompCfarError, ArithmeticError):
    """Quadrature or root bracketing did not converge."""


class DomainError(NompCfarError, ValueError):
    """Input lies outside the numerically stable domain of a routine."""


class IllConditionedError(NompCfarError, ArithmeticError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class InfeasibleScenarioError(NompCfarError):
    pass


class OutOfFieldOfViewError(NompCfarError, ValueError):
    pass


class ConfigError(NompCfarError):
    """Experiment configuration could not be parsed or validated."""
