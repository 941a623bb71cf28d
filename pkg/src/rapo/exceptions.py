"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Invalid solver or run configuration."""


class ConvergenceError(RuntimeError):
    """Iteration cap reached before the stopping rule fired."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalFailure(RuntimeError):
    """Non-finite quantity appeared during training."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
