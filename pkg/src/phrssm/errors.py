"""Exception hierarchy shared across the package."""


class PHRSSMError(Exception):
    """Base class for all package errors."""


class DimensionError(PHRSSMError, ValueError):
    pass


class NumericalError(PHRSSMError, FloatingPointError):
    """Raised when a non-finite value shows up in a computation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientDataError(PHRSSMError, ValueError):
    pass


class DegenerateBaselineError(PHRSSMError, ZeroDivisionError):
    pass


class ConfigError(PHRSSMError, ValueError):
    pass


class VersionError(PHRSSMError):
    """Checkpoint and config (or format version) disagree."""
