"""Exception types raised across the package."""


class ViiglError(Exception):
    pass


class ShapeError(ViiglError, ValueError):
    """Operand shapes do not agree."""


class ContractError(ViiglError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ViiglError, ValueError):
    """A configuration value is invalid or unknown."""


class FormatError(ViiglError, ValueError):
    """A data file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ClassStarvationError(ViiglError, RuntimeError):
    """A decoded reward class has no members in the augmented batch."""

    def __init__(self, missing_class):
        super().__init__(f"decoded reward class {missing_class} has no augmented members")
        self.missing_class = missing_class


class NonFiniteError(ViiglError, FloatingPointError):
    """A loss or parameter became NaN or infinite during training."""
