"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid grid sizes, parameter ranges, schedules or config files."""


class ModelError(ValueError):
    """A synthetic geometry model is internally inconsistent."""


class SolvabilityError(ValueError):
    """A linear problem has no solution under the stated constraints."""


class NumericalError(RuntimeError):
    """An iteration failed to converge or produced invalid values."""


class DivergenceError(NumericalError):
    """Newton or continuation diverged; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class PositivityError(NumericalError):
    """A metric density left the Kahler cone (nonpositive somewhere)."""


class StabilityGuardError(ConfigurationError):
    """An explicit time step exceeds its stability guard."""
