"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class ParameterError(ValueError):
    """Raised when a scalar argument is out of its valid range."""


class ContractError(RuntimeError):
    """Raised when a call violates a usage precondition."""


class ParseError(ValueError):
    """Raised for malformed files. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(ValueError):
    """Raised when a checkpoint or config does not match what is expected."""


class FileError(OSError):
    """Raised when reading or writing a dataset file fails."""
