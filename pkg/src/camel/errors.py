"""Exception types shared across the package."""


class CamelError(Exception):
    pass


class ConfigError(CamelError, ValueError):
    """Invalid shapes, hyperparameters or run configuration."""


class DataError(CamelError, ValueError):
    """Malformed or out-of-range stream data."""


class InvariantError(CamelError, RuntimeError):
    """An operation would break a structural invariant, or was called out of order."""


class EndOfStream(CamelError):
    """A finite source has no complete window left."""
