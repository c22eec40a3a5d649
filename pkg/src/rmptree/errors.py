"""Exception hierarchy shared by all modules."""


class RmpTreeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RmpTreeError):
    """Operands have incompatible or unexpected shapes."""


class NumericError(RmpTreeError):
    """A computation produced (or received) NaN/Inf values."""


class SingularityError(RmpTreeError):
    """Evaluation at a point where the map's derivative is undefined."""


class ConfigError(RmpTreeError):
    """Invalid construction parameters or configuration files."""


class StabilityContractError(RmpTreeError):
    """A precondition of the stability guarantee was violated at runtime
    (negative fusion weight, non-PSD inertia handed to resolve, ...)."""
