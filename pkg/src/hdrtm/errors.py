"""Exception and warning types shared across the package."""


class HdrtmError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------- I/O errors


class UnsupportedFormat(HdrtmError):
    """File extension or on-disk layout this package does not handle."""


class CorruptFile(HdrtmError):
    """File exists but its contents cannot be decoded."""


class AllZeroImage(HdrtmError):
    """Radiance image with no strictly positive pixel."""


# ------------------------------------------------------------ shape errors


class ShapeMismatch(HdrtmError):
    """Two arrays that must share a shape do not."""


class ShapeNotDivisible(HdrtmError):
    """Spatial size not divisible by the required factor."""


class TooSmall(HdrtmError):
    """Input smaller than the operation's minimum size."""


class TooSmallInput(TooSmall):
    """Input too small for the discriminator's stride-2 cascade."""


class OddDimensions(HdrtmError):
    """Operation requires even height and width."""


class LengthMismatch(HdrtmError):
    """Sequences that must have equal length do not."""


# ------------------------------------------------------- model-side errors


class BufferShapeMismatch(HdrtmError):
    """Temporal buffer holds features of a different shape than offered."""


class BetaTooSmall(HdrtmError):
    """Temporal splice fraction rounds to zero channels."""


class TooFewNodes(HdrtmError):
    """Graph layer got fewer nodes than neighbours requested."""


class CheckpointMismatch(HdrtmError):
    """Checkpoint architecture config incompatible with the live model."""


# -------------------------------------------------------- loss-side errors


class BatchTooSmall(HdrtmError):
    """Batch too small for an op that needs several distinct members."""


class EmptyBatch(HdrtmError):
    """Empty collection where at least one element is required."""


class NonFiniteComponent(HdrtmError):
    """A loss term evaluated to NaN or infinity."""


class NonFiniteLoss(NonFiniteComponent):
    """Aggregated training loss became non-finite; step was rolled back."""


# ------------------------------------------------------- data-side errors


class EmptyPool(HdrtmError):
    """A dataset pool (hdr / ldr_good / ldr_poor) has no usable items."""


class SourceTooSmall(HdrtmError):
    """Source image too small to produce the requested crops."""


class InsufficientFrames(HdrtmError):
    """Video shorter than the requested clip length."""


class TooFewFrames(HdrtmError):
    """Clip has fewer frames than the metric requires."""


class EmptyDataset(HdrtmError):
    """Evaluation directory contains no videos."""


class DegenerateInput(HdrtmError):
    """Input without enough variation for the metric to be defined."""


class ConfigError(HdrtmError):
    """Invalid or contradictory configuration."""


class OOMBudgetExceeded(HdrtmError):
    """Estimated training-step memory exceeds the configured budget."""


# -------------------------------------------------------------- warnings


class DegenerateRangeWarning(UserWarning):
    """Normalization hit a constant image; a flat map was returned."""


class NegativePixelWarning(UserWarning):
    """Negative radiance values were clamped to zero on load."""


class AllScoresEqualWarning(UserWarning):
    """Ranking scores all equal; positive/negative choice is arbitrary."""


class DuplicatePathWarning(UserWarning):
    """The same file appeared more than once while building a manifest."""
