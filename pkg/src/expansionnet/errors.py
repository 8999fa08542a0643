"""Exception types shared across the package."""


class ExpansionNetError(Exception):
    """Base class for all package errors."""


class DimensionError(ExpansionNetError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ExpansionNetError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(ExpansionNetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class LengthError(ExpansionNetError, ValueError):
    """A sequence exceeds the configured maximum length."""


class FormatError(ExpansionNetError, ValueError):
    """A binary container could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
