"""Exception hierarchy for the btcxr toolkit.

Every domain error raised by the library derives from :class:`BtcxrError`,
so callers (and the CLI) can distinguish domain failures (exit code 1)
from usage errors and genuine bugs.
"""

from __future__ import annotations


class BtcxrError(Exception):
    """Base class for all toolkit domain errors."""

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class DegenerateBox(BtcxrError):
    """A box has zero or negative extent (possibly after clamping)."""


class MissingDimension(BtcxrError):
    """An annotation references an image with no known width/height."""


class MalformedRow(BtcxrError):
    """A CSV row could not be parsed; carries the 1-based row number."""

    def __init__(self, message: str, row: int, **context):
        super().__init__(f"row {row}: {message}", row=row, **context)
        self.row = row


class SchemaVersionMismatch(BtcxrError):
    """A serialized file declares an unsupported format version."""


class EmptyDataset(BtcxrError):
    """An operation requires at least one example."""


class FractionTooSmall(BtcxrError):
    """A subsample fraction selects an empty fold."""


class NoGroundTruth(BtcxrError):
    """Every class is undefined: no ground-truth boxes at all."""


class SingleClassOnly(BtcxrError):
    """ROC-AUC needs at least one positive and one negative label."""


class AllResamplesUndefined(BtcxrError):
    """The metric was undefined on every bootstrap resample."""


class ShapeMismatch(BtcxrError):
    """Two arrays that must agree in shape do not."""


class ImageTooSmall(BtcxrError):
    """Augmentation input is below the minimum supported size."""


class DivergenceDetected(BtcxrError):
    """Training loss became non-finite."""


class DegenerateLabels(BtcxrError):
    """No label column carries both a positive and a negative example."""


class UnknownImageId(BtcxrError):
    """A prediction references an image_id absent from the ground truth."""
