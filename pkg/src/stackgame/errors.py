"""Exception types shared across the package."""


class StackgameError(Exception):
    pass


class ConfigError(StackgameError, ValueError):
    """Bad schedule, config key or parameter value."""


class ArgumentError(StackgameError, ValueError):
    """Shape or dimension mismatch in a call."""


class DivergenceError(StackgameError, FloatingPointError):
    """A non-finite value appeared during an update.

    ``iteration`` is the index of the offending update and ``partial`` may hold
    whatever the caller had logged before the failure.
    """

    def __init__(self, message, iteration=None, partial=None):
        super().__init__(message)
        self.iteration = iteration
        self.partial = partial


class SlaterViolationError(StackgameError):
    """No strictly feasible follower action was found at some probe."""


class UnsupportedEstimatorError(StackgameError):
    """The requested gradient estimator does not apply to this policy."""


class CheckpointError(StackgameError):
    """Unreadable, truncated or mismatched checkpoint."""
