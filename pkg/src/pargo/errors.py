"""Exception types shared across the package."""


class PargoError(Exception):
    """Base class for all package errors."""


class ShapeError(PargoError):
    """Operand shapes or dtypes do not satisfy an operation's contract."""


class MaskError(PargoError):
    """An attention mask is malformed or incompatible with its call site."""


class ConfigError(PargoError):
    """A configuration value violates a structural invariant."""


class CheckpointError(PargoError):
    """A checkpoint file is unreadable, corrupt, or inconsistent."""


class TrainingDivergedError(PargoError):
    """Training produced a non-finite loss."""
