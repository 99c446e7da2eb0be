"""Exception hierarchy shared across the toolkit.

Every error carries a ``category`` used by the CLI to classify failures
(config | data | numeric | io) and pick an exit code.
"""


class FcnPoseError(Exception):
    """Base class for all toolkit errors."""

    category = "data"


class ContractViolation(FcnPoseError):
    """An operation was called with arguments violating its preconditions."""

    category = "config"


class GenerationError(FcnPoseError):
    """Scene generation could not produce a valid sample."""

    category = "data"


class UndefinedMetricError(FcnPoseError):
    """A metric has no defined value for the given inputs."""

    category = "data"


class TrainingDivergedError(FcnPoseError):
    """Training produced a non-finite loss."""

    category = "numeric"


class QuantizationOverflowError(FcnPoseError):
    """A weight is too large to represent as a finite half-precision value."""

    category = "numeric"


class ModelFormatError(FcnPoseError):
    """A model file could not be parsed."""

    category = "io"


class BadMagicError(ModelFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(ModelFormatError):
    """The file declares a format version this build cannot read."""


class TruncatedFileError(ModelFormatError):
    """The file ended before the declared payload was complete."""
