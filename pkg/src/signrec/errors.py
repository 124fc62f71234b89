"""Exception types shared across the package."""


class SignRecError(Exception):
    """Base class for package errors."""


class EmptyDatasetError(SignRecError):
    pass


class InvariantError(SignRecError, ValueError):
    """A data structure invariant would be violated."""


class ContractError(SignRecError, ValueError):
    """Inputs do not satisfy an operation's preconditions (shapes, state)."""


class ConfigError(SignRecError, ValueError):
    pass


class NonFiniteError(SignRecError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""
