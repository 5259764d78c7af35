"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 2, everything else to 1.
"""


class FedcvuError(Exception):
    """Base class for all package errors."""


class ConfigError(FedcvuError):
    """Invalid or inconsistent configuration, including strict-parse failures."""


class UsageError(FedcvuError):
    """An API was called out of order (e.g. backward before forward)."""


class NumericError(FedcvuError):
    """Non-finite values where finite ones are required."""


class DegenerateBatchError(FedcvuError):
    """A batch too small to compute batch statistics in train mode."""


class ProtocolError(FedcvuError):
    """A client/server exchange violated the round protocol."""
