"""Exception types shared across modules."""


class SchemaError(ValueError):
    """A JSON document does not match its schema; ``path`` locates the problem."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class NumericError(ArithmeticError):
    """Non-finite values appeared during a computation."""
