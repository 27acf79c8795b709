"""Exception types shared across the toolkit."""


class FHVAEError(Exception):
    pass


class InputContractError(FHVAEError, ValueError):
    """Raised when an argument violates a shape, length or finiteness contract."""


class NumericError(FHVAEError, ArithmeticError):
    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f"non-finite value in term '{term}'")


class DataError(FHVAEError, ValueError):
    pass


class FormatError(FHVAEError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ModeError(FHVAEError, ValueError):
    """Raised when an operation is applied to a model of the wrong mode."""
