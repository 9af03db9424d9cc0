"""Exception and warning classes used across reqgate."""


class ReqgateError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ReqgateError, ValueError):
    """Invalid parameters, counts, requirement values or config keys."""


class ShapeError(ReqgateError, ValueError):
    """Array or file content with the wrong dimensions."""


class DataFormatError(ReqgateError):
    """Malformed dataset, feature or model file.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DeadModelError(ReqgateError):
    """Phase-2 training has no class-1 sample left in the loss support."""


class ConvergenceWarning(UserWarning):
    """An optimizer hit its iteration cap before meeting its stopping rule."""
