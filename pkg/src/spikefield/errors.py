"""Exception types shared across the package."""


class ModelError(ValueError):
    """Invalid model, measure or configuration input."""


class NumericalError(RuntimeError):
    """A numerical procedure failed to reach its stated accuracy."""


class BracketError(NumericalError):
    """A root bracket could not be found in the scanned interval."""


class ConvergenceError(NumericalError):
    """An iteration exceeded its budget; ``residual`` holds the last residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class StepSizeError(NumericalError):
    """A time step is too large for the scheme to stay well posed."""
