from __future__ import annotations


class FormatError(ValueError):
    """Malformed or unsupported file payload."""


class ConfigError(ValueError):
    """Unknown or ill-typed configuration key."""


class CheckpointError(ValueError):
    """Checkpoint directory does not match the expected detector layout."""


class PointAtInfinityError(ValueError):
    """A homography maps the point onto the line at infinity."""


class SingularHomographyError(ValueError):
    """Homography matrix is not invertible."""


class UndefinedMetricError(ValueError):
    """Metric has an empty denominator."""


class EstimationError(ValueError):
    """Robust estimation could not produce a model."""


class InsufficientDataError(EstimationError):
    pass


class DegenerateConfigurationError(EstimationError):
    pass


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""
