"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ImageIOError(OSError):
    """An image or depth file could not be read or written."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class UnsupportedBitDepthError(ImageIOError):
    pass


class DatasetError(ValueError):
    """A dataset directory or manifest violates its contract."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message, last_finite_step=None):
        self.last_finite_step = last_finite_step
        super().__init__(f"{message} (last finite step: {last_finite_step})")
