"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be loaded into the target model."""
