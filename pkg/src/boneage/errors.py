"""Exception types shared across the package."""


class BoneAgeError(Exception):
    """Base class for every error raised by this package."""


class ContractError(BoneAgeError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor or image extents are incompatible with the operation."""


class ConfigError(BoneAgeError):
    """A configuration value is invalid or inconsistent."""


class TrainingError(BoneAgeError):
    """Training produced a non-finite loss or gradient."""


class ImageIOError(BoneAgeError):
    """An image file could not be read or written."""


class CheckpointError(BoneAgeError):
    """A checkpoint file is malformed or does not match the model."""


class StartupError(BoneAgeError):
    """A pipeline stage could not be brought up (e.g. missing checkpoint)."""
