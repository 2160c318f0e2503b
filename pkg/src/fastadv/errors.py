"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A model, attack or training configuration is invalid."""


class InputError(ValueError):
    """Data handed to an operation violates its preconditions."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary layout."""


class TrainingAborted(RuntimeError):
    """Raised when training hits a non-finite loss or gradient.

    ``history`` holds whatever was recorded before the abort and
    ``diagnostics`` describes where it happened.
    """

    def __init__(self, message, history=None, diagnostics=None):
        super().__init__(message)
        self.history = history
        self.diagnostics = diagnostics or {}
