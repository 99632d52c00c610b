"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class GradientError(RuntimeError):
    """Gradient bookkeeping was violated (missing grad, non-scalar loss, ...)."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""
