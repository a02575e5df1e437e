"""Exception hierarchy. Each CLI-facing error carries its process exit code."""


class KefsError(Exception):
    exit_code = 1


class ConfigError(KefsError, ValueError):
    exit_code = 2


class InputDataError(KefsError, ValueError):
    exit_code = 3


class TrainingDivergence(KefsError, ArithmeticError):
    exit_code = 4


class StorageError(KefsError, OSError):
    exit_code = 5


class StateError(KefsError, RuntimeError):
    """A component was used before it was initialized."""


class InvariantViolation(KefsError, AssertionError):
    """An internal precondition that upstream code should have guaranteed."""


class CheckpointError(InputDataError):
    """Checkpoint could not be parsed, or its names/shapes do not fit the model."""
