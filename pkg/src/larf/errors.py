"""Exception hierarchy shared across the package."""


class LarfError(Exception):
    """Base class for all errors raised by larf."""


class ValidationError(LarfError, ValueError):
    """Invalid user input or configuration (CLI exit code 1)."""


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class NonpositiveTemperature(ValidationError):
    pass


class InvalidBounds(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class TooFewRows(ValidationError):
    pass


class ConstantTarget(ValidationError):
    pass


class MissingTarget(ValidationError):
    pass


class MismatchedCells(ValidationError):
    pass


class VariantKernelMismatch(ValidationError):
    pass


class ParseError(ValidationError):
    """A CSV cell could not be read as a number."""

    def __init__(self, message: str, row: int, col: int):
        super().__init__(f"{message} (row {row}, column {col})")
        self.row = row
        self.col = col
