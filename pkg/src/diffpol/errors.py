"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was expected."""


class FormatError(ValueError):
    """A binary file is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
