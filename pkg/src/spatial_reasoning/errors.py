"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A run, probe or geometry configuration cannot be satisfied."""


class IngestionError(RuntimeError):
    """A dataset archive is missing, truncated or unreadable."""

    def __init__(self, message, path=None):
        super().__init__(f"{message} ({path})" if path is not None else message)
        self.path = path


class ChecksumMismatch(IngestionError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when optimisation cannot continue (non-finite loss, failed checkpoint write)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
