"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems (files, checkpoints) exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class DataError(RuntimeError):
    """Unreadable, malformed, or mismatched data/checkpoint file."""


class NumericsError(RuntimeError):
    """Non-finite value encountered where the pipeline requires finite math."""
