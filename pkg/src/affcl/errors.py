"""Exception types shared across the package.

Everything derives from ValueError so callers that don't care about the
fine-grained category can catch one thing.
"""


class ShapeError(ValueError):
    """Input tensor has the wrong shape or dimension."""


class NumericError(ValueError):
    """Input contains NaN or infinite entries."""


class EmptyBatchError(ValueError):
    """An operation that needs at least one sample got none."""


class EmptySupportError(ValueError):
    """Sampling was requested before any class has been observed."""


class LabelDomainError(ValueError):
    """A label lies outside the global class space."""


class WeightDomainError(ValueError):
    """Replay weights must be nonnegative."""


class DegenerateBatchError(ValueError):
    """Every candidate in the batch has zero density."""


class ManifestMismatchError(ValueError):
    """Parameter vectors/manifests from incompatible models."""


class DegenerateAggregationError(ValueError):
    """Aggregation weights sum to zero."""


class FormatError(ValueError):
    """A file does not look like the expected format (bad magic)."""


class IntegrityError(ValueError):
    """A file parses but its contents are inconsistent or truncated."""


class CapacityError(ValueError):
    """The data pool cannot supply the requested federation."""


class IncompleteMatrixError(ValueError):
    """A metric needs accuracy entries that were never recorded."""


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


class InventoryError(ValueError):
    """Expected run artifacts are missing or inconsistent."""
