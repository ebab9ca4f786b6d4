"""Exception hierarchy shared across the library."""


class VolfuseError(Exception):
    """Base class for all library errors."""


class ShapeError(VolfuseError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(VolfuseError):
    """An operation produced (or was handed) NaN or Inf values."""


class ConfigError(VolfuseError):
    """A configuration document or object is invalid."""


class DataFormatError(VolfuseError):
    """On-disk volume or manifest data is malformed."""


class DatasetError(VolfuseError):
    """A dataset cannot be used as requested (empty, single-class, ...)."""


class CheckpointError(VolfuseError):
    """Base for checkpoint persistence failures."""


class CheckpointHashError(CheckpointError):
    """Parameter blob does not match the manifest hash."""


class CheckpointShapeError(CheckpointError):
    """Manifest parameter shapes disagree with the model."""


class CheckpointTruncatedError(CheckpointError):
    """Parameter blob is shorter than the manifest index requires."""
