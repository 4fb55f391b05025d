"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument value."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during evaluation."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ProtocolError(RuntimeError):
    """An environment or file was used out of order."""
