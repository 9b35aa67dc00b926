"""Exception hierarchy shared across the package."""


class LensError(Exception):
    """Base class for all package errors."""


class ArgumentError(LensError, ValueError):
    """Invalid argument: wrong shape, out-of-range rank, unknown language."""


class ConfigError(LensError, ValueError):
    """Invalid or incomplete configuration (e.g. missing push strength)."""


class NumericalError(LensError, ArithmeticError):
    """A numeric routine failed to converge or produced a non-finite result."""


class FormatError(LensError, ValueError):
    """A file does not match its binary/text format.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
