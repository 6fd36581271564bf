"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit-code contract: ``DataError``
(malformed or missing inputs, exit code 3) and ``NumericError`` (degenerate
or diverging numerics, exit code 4).
"""


class NowcastError(Exception):
    """Base class for all package errors."""


class DataError(NowcastError):
    """Malformed, missing or inconsistent input data."""


class NumericError(NowcastError):
    """Numerically degenerate input or diverging computation."""


# --- grid storage ---

class BadMagic(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(DataError):
    """File ends before the declared payload is complete."""


class DimensionMismatch(DataError):
    """Declared grid dimensions disagree with the payload."""


class WrongFrameCount(DataError):
    """An operation received the wrong number of frames."""


class NonConsecutive(DataError):
    """Frame timestamps are not consecutive at 10-minute spacing."""


class CropTooLarge(DataError):
    """Requested crop exceeds the grid extent."""


class EmptyTrainingSet(DataError):
    """Normalization statistics requested over an empty training set."""


class DegenerateQuantile(NumericError):
    """A normalization quantile came out non-positive."""


class WrongLevelCount(DataError):
    """Radar volume does not have the expected number of levels."""


class ManifestError(DataError):
    """Dataset manifest is malformed."""


# --- synthetic scenes ---

class ShiftTooLarge(DataError):
    """Requested per-frame translation exceeds the allowed range."""


# --- baselines / forecasting ---

class MissingFrame(DataError):
    """A required input frame is absent from the sample."""


class DegenerateInput(NumericError):
    """Input carries no usable signal (e.g. all-constant field)."""


# --- network / losses ---

class ShapeMismatch(DataError):
    """Array shapes are inconsistent with the operation's contract."""


class DomainError(NumericError):
    """A value sits outside the mathematical domain of the operation."""


class ConflictingSpec(DataError):
    """A loss specification combines options the model never combines."""


# --- training ---

class EmptySplit(DataError):
    """The requested dataset split contains no samples."""


class NaNLoss(NumericError):
    """Training loss became non-finite."""


class CheckpointVersionMismatch(DataError):
    """Checkpoint container version is not supported."""


# --- metrics ---

class TooFewUnits(DataError):
    """Standard error requested over fewer than two aggregation units."""


# --- blending ---

class DegenerateMap(NumericError):
    """A probability map has a degenerate (zero) reference quantile."""


class IoError(DataError):
    """Filesystem operation failed while writing artifacts."""
