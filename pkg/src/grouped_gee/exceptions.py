"""Exception hierarchy shared across the package."""


class GroupedGEEError(Exception):
    """Base class for all package errors."""


class ContractError(GroupedGEEError, ValueError):
    """An argument violates an operation's preconditions."""


class ParameterError(ContractError):
    """A correlation parameter lies outside its admissible range."""


class EmptyGroupError(ContractError):
    """A computation was restricted to a group with no members."""


class NumericError(GroupedGEEError, ArithmeticError):
    """A numerical routine failed (non-finite iterate, failed factorization)."""


class DataError(GroupedGEEError, ValueError):
    """Malformed input data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """A serialized fit or result has an unsupported layout or version."""
