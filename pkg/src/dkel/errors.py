"""Exception types shared across the package."""


class DKELError(Exception):
    """Base class for all package errors."""


class ShapeError(DKELError, ValueError):
    """Tensor dimensions do not agree."""


class ParameterError(DKELError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigurationError(DKELError, ValueError):
    """Inconsistent experiment or network configuration."""


class DataError(DKELError, ValueError):
    """Invalid labels or dataset sizes."""


class UsageError(DKELError, RuntimeError):
    """An API was called in a state it does not support."""


class TrainingAborted(DKELError, RuntimeError):
    """Training stopped: a non-finite loss or a collapse-monitor abort.

    ``diagnostics`` carries the parameter norms and epoch at the moment of
    failure so a collapse can be inspected after the fact.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
