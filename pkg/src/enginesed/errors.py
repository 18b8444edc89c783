"""Error categories shared across the package.

The CLI maps these onto distinct exit codes (config=2, data=3, numeric=4).
"""


class EngineSedError(Exception):
    pass


class ConfigError(EngineSedError):
    """Invalid configuration, incompatible shapes/against-contract arguments."""


class DataError(EngineSedError):
    """Missing or malformed input data (files, labels, signals)."""


class NumericError(EngineSedError):
    """Numerical failure: NaN gradients/losses, non-scalar backward, etc."""
