"""Exception types shared across the package."""


class DecgpError(Exception):
    """Base class for package errors."""


class ContractError(DecgpError, ValueError):
    """An input violates an operation's preconditions."""


class ConditioningError(DecgpError):
    """A covariance matrix could not be factorized even with jitter."""


class NonConvergenceError(DecgpError):
    """An iterative method hit its iteration cap."""


class TopologyError(DecgpError, ValueError):
    """A graph is malformed or disconnected."""
