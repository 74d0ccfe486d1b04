"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's preconditions (shapes, ranges, ordering)."""


class AttackFailure(RuntimeError):
    """The adversarial gradient could not be computed (non-finite values)."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigError(ValueError):
    """Invalid or unknown configuration keys/values."""
