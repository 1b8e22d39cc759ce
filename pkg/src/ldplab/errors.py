"""Failure types shared across the package."""


class NumericalFailure(RuntimeError):
    """Non-finite state, underflow, or non-convergence in a numerical routine."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration; message names the key."""
