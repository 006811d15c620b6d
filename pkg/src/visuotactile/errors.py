"""Exception types shared across the package."""


class VisuoTactileError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(VisuoTactileError, ValueError):
    pass


class LabelError(VisuoTactileError, ValueError):
    pass


class ContractError(VisuoTactileError):
    """A caller broke an operation's precondition."""


class ConfigError(VisuoTactileError, ValueError):
    pass


class LifecycleError(VisuoTactileError):
    pass


class StateError(VisuoTactileError):
    pass


class RangeError(VisuoTactileError, ValueError):
    pass


class SplitError(VisuoTactileError, ValueError):
    pass


class NumericError(VisuoTactileError, ArithmeticError):
    pass


class ControlAbort(VisuoTactileError):
    """A closed-loop run was stopped before completing (timeout, NaN estimate, no lift)."""
