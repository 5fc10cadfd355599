"""Exception hierarchy shared across the package."""


class StormcastError(Exception):
    """Base class for all stormcast errors."""


class ContractError(StormcastError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericalError(StormcastError):
    """A computation produced NaN or Inf, or otherwise left the finite domain."""


class ConfigError(StormcastError):
    """Invalid or unknown configuration input."""


class DataError(StormcastError):
    """Missing, malformed, or inconsistent data files."""
