class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values (e.g. diverging training)."""
