"""Exception types shared across the package."""


class IouPostError(ValueError):
    """Base class for domain errors raised by this package."""


class DegenerateBoxError(IouPostError):
    """A box or bin with non-positive width or height where a valid one is required."""


class ConfigError(IouPostError):
    """Invalid or infeasible configuration."""


class UndefinedMetricError(IouPostError):
    """A metric that has no defined value for the given inputs."""


class TrainingDivergedError(IouPostError):
    """Training produced a non-finite loss."""
