from typing import Optional


class BRWPError(Exception):
    """Base class for every error raised by the sampling lab"""


class ParameterError(BRWPError, ValueError):
    """Invalid argument passed to a numerical routine"""


class ConfigError(ParameterError):
    """Invalid, unknown or malformed experiment configuration"""


class NumericalError(BRWPError, ArithmeticError):
    """A computation aborted because its result cannot be trusted"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration

    def __str__(self) -> str:
        message = super().__str__()
        if self.iteration is not None:
            return f"{message} (iteration {self.iteration})"
        return message


class DegenerateDensityError(NumericalError):
    """Density with zero, negative or non-finite mass"""


class TruncationError(NumericalError):
    """Quadrature grid too narrow for the integrand"""


class StepsizeError(NumericalError):
    """Stepsize too large for the Laplace approximation"""


class IsolatedParticleError(NumericalError):
    """Particle too far from the ensemble for the kernel sum"""


class ClampingError(NumericalError):
    """Too many particles fell outside the score grid"""


class BoundEvaluationError(NumericalError):
    """Theory bound has a degenerate denominator"""
