"""Exception types mapped to command-line exit codes."""


class ConfigError(Exception):
    """Bad or missing configuration, checkpoint or weight artifact (exit code 2)."""


class DataError(Exception):
    """Unusable input data (exit code 3)."""


class NumericAbort(RuntimeError):
    """A training loss went non-finite (exit code 4)."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
