"""Shared exception types, mapped to CLI exit codes in `stmae.cli`."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible arguments (CLI exit code 2)."""


class DataFormatError(ValueError):
    """Malformed input data: ragged CSV, bad manifest, unreadable cache (exit code 2)."""


class NanLossError(RuntimeError):
    """Training aborted on a non-finite loss (exit code 3).

    Carries a `dump` dict describing the offending batch so the failure can
    be inspected offline.
    """

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
