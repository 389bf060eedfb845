"""Exception hierarchy.

The four branch classes map onto the CLI exit codes: ConfigError -> 2,
DataError -> 3, BackboneUnavailable -> 4, InvariantViolation -> 5.
"""


class BoxPromptError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BoxPromptError):
    """Invalid configuration, shapes, or arguments."""


class DataError(BoxPromptError):
    """Invalid or missing data."""


class BackboneUnavailable(BoxPromptError):
    """A real-weights backbone adapter was requested but cannot be built."""


class InvariantViolation(BoxPromptError):
    """An internal invariant was broken; indicates a bug."""


class EmptyMask(DataError):
    """Mask has no foreground pixel."""


class BoxOutOfBounds(DataError):
    """Box does not fit inside the given grid shape."""


class InvalidWidth(ConfigError):
    """Band width must be >= 1."""


class ShapeMismatch(ConfigError):
    """Two grids that must align have different shapes."""


class ShapeSpecMismatch(ConfigError):
    """Module config does not match the backbone shape spec."""


class WrongInputSize(ConfigError):
    """Image does not have the backbone's expected input size."""


class EpochOutOfRange(ConfigError):
    """Epoch index outside [0, epochs)."""


class EmptyInput(DataError):
    """Operation requires a non-empty array."""


class KTooLarge(DataError):
    """Few-shot k exceeds the train-split size."""


class EmptyTrainSet(DataError):
    """Training requires at least one sample."""


class CacheMiss(DataError):
    """Embedding requested from cache but neither cached nor computable."""


class CacheConflict(DataError):
    """Cache key collision with a different fingerprint or payload."""


class IOFailure(DataError):
    """Underlying file I/O failed."""


class MissingMask(DataError):
    """Evaluation requires a ground-truth mask."""


class EmptyList(DataError):
    """Aggregation requires at least one report."""
