"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""


class CheckpointError(ValueError):
    """A checkpoint does not match the requested network configuration."""


class UninitialisedStatisticsError(RuntimeError):
    """Batch-norm running statistics were requested before any were recorded."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class InsufficientDataError(ValueError):
    """Too few observations for the requested statistic."""


class UndefinedMeasureError(ValueError):
    """A clinical measure is mathematically undefined for its inputs."""
