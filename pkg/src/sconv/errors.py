"""Exception hierarchy shared across the package.

Each error carries a short machine-readable ``category`` used by the CLI
to tag failures on stderr.
"""


class SconvError(Exception):
    category = "error"


class DimensionError(SconvError):
    """Shapes or extents are inconsistent."""

    category = "dimension"


class NumericError(SconvError):
    """Non-finite values where finite ones are required."""

    category = "numeric"


class StateError(SconvError):
    """Operation invoked in an invalid state (e.g. backward before forward)."""

    category = "state"


class DataError(SconvError):
    """Invalid data content (bad label ids, non-positive depth, ...)."""

    category = "data"


class ConfigError(SconvError):
    category = "config"


class MetricError(SconvError):
    category = "metric"


class GenerationError(SconvError):
    """Synthetic scene generation could not satisfy its constraints."""

    category = "generation"


class CheckpointError(SconvError):
    category = "checkpoint"
