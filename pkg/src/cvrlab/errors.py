"""Exception types shared across the package."""


class CvrLabError(Exception):
    """Base class for package errors."""


class ConfigurationError(CvrLabError, ValueError):
    """An invalid configuration value; the message names the field."""


class ParseError(CvrLabError, ValueError):
    """A malformed input line; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class OrderingError(CvrLabError, ValueError):
    """Input stream not sorted by its time key."""


class InputError(CvrLabError, ValueError):
    """A model input outside the declared feature space."""


class NumericError(CvrLabError, ValueError):
    """A numeric argument outside its valid domain (NaN, negative, ...)."""


class TrainingError(CvrLabError, RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""


class UndefinedMetricError(CvrLabError, ValueError):
    """Metric undefined for this input (single class, zero gap, ...)."""


class ProtocolError(CvrLabError, ValueError):
    """Streaming protocol misuse (bucket misalignment, ...)."""


class UnsupportedOperationError(CvrLabError, ValueError):
    """Operation requires information this data source does not have."""
