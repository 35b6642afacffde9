"""Exception types shared across the pipeline.

Each maps to a CLI exit code: input problems exit 2, configuration
problems exit 3, and too few usable subjects exits 4.
"""


class InputError(ValueError):
    """Input data or files cannot be used."""


class ConfigError(ValueError):
    """A configuration value is outside what the pipeline accepts."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class StatisticalAbort(RuntimeError):
    """Too few subjects survive for the statistics to be defined."""
