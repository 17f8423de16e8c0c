"""Exception hierarchy shared by every module of the toolkit."""


class ExtractLabError(Exception):
    """Base class for all library errors."""


class ConfigError(ExtractLabError):
    """Invalid configuration or hyperparameters."""


class ArgumentError(ExtractLabError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(ArgumentError):
    """Matrix dimensions do not agree."""


class NumericError(ExtractLabError, ArithmeticError):
    """A NaN or infinity appeared in a numeric result."""


class LoadError(ExtractLabError, OSError):
    """A dataset or model file is missing or unreadable."""


class FormatError(ExtractLabError):
    """A dataset or model file is present but malformed."""


class IoError(ExtractLabError, OSError):
    """An output file could not be written."""


class BudgetError(ExtractLabError):
    """The victim's query budget would be exceeded."""


class ProtocolError(ExtractLabError):
    """The server rejected a request as malformed (HTTP 400/401)."""


class TransportError(ExtractLabError):
    """The victim could not be reached."""
