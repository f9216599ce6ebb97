"""Exception hierarchy shared by every idqn module."""


class IDQNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IDQNError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(IDQNError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(IDQNError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class EditError(IDQNError, ValueError):
    """A gridworld state edit would break a state invariant."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        msg = f"edit violates invariant '{invariant}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class CheckpointError(IDQNError, IOError):
    """A checkpoint file is truncated, corrupt, or of the wrong version."""
