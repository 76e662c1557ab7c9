"""Exception types shared across the package.

The CLI maps these onto process exit codes (config error -> 2, numeric
failure -> 3); library code raises them directly.
"""


class ConfigError(Exception):
    """Invalid configuration, malformed input file or bad CLI arguments."""


class NumericError(Exception):
    """Non-finite values or divergence detected during optimisation."""
