"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
InvariantError -> 3.
"""


class SupplinkError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(SupplinkError, ValueError):
    """Invalid configuration value, unknown key, or bad template."""


class DataError(SupplinkError, ValueError):
    """Malformed input file, unknown company/year, or schema mismatch."""


class DimensionError(SupplinkError, ValueError):
    """Tensor shapes do not line up."""


class ContractError(SupplinkError, RuntimeError):
    """A caller broke an operation's precondition."""


class InvariantError(SupplinkError, RuntimeError):
    """Internal consistency check failed."""


class SamplingError(SupplinkError, RuntimeError):
    """Random search for a valid sample gave up."""
