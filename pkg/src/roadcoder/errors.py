"""Exception types shared across the pipeline.

Every error raised on a contract violation has its own class so callers
(and the CLI exit-code mapping) can react without string matching.
"""

from __future__ import annotations


class RoadCoderError(Exception):
    """Base class for all pipeline errors."""


# codebook
class SchemaViolation(RoadCoderError):
    """A codebook or config file does not conform to its schema."""


class DuplicateId(SchemaViolation):
    """Duplicate attribute id or class code inside one scope."""


class UnknownClassCode(RoadCoderError):
    """A class code was referenced that the attribute does not define."""


# dataset
class ManifestParseError(RoadCoderError):
    """Dataset manifest is malformed (missing columns, bad values)."""


class DanglingReference(RoadCoderError):
    """A record references an image or segment that does not exist."""


class GroundTruthCodeUnknown(RoadCoderError):
    """A ground-truth cell holds a code absent from the codebook."""


class EmptyDataset(RoadCoderError):
    """An operation requiring at least one segment got none."""


class UnsupportedPixelFormat(RoadCoderError):
    """Image buffer has a dtype or shape the augmenter cannot handle."""


# prompting
class TemplateError(RoadCoderError):
    """Prompt template contains an unknown placeholder."""


class MissingImageBytes(RoadCoderError):
    """User prompt requires image bytes that could not be loaded."""


# vlm client
class AuthError(RoadCoderError):
    """Backend rejected the credentials."""


class TransportError(RoadCoderError):
    """Network-level failure talking to a backend.

    `transient` marks failures worth retrying (timeouts, 5xx, throttling);
    permanent request errors set it False.
    """

    def __init__(self, message: str, *, transient: bool = True) -> None:
        super().__init__(message)
        self.transient = transient


class RateLimited(TransportError):
    """Backend asked us to slow down; always transient."""


class RateLimitedExhausted(RoadCoderError):
    """Backend kept rate-limiting beyond the retry budget."""


class ResponseUnparseable(RoadCoderError):
    """Even salvage parsing recovered zero attributes from a response."""


class BudgetExceeded(RoadCoderError):
    """The run's hard request budget was hit."""


# assessment
class SegmentImageMismatch(RoadCoderError):
    """Image-level predictions do not belong to the segment under aggregation."""


class MissingAttribute(RoadCoderError):
    """Scoring configuration references an attribute absent from the road."""


class InvalidConfiguration(RoadCoderError):
    """Scoring configuration violates its schema or ordering constraints."""


class LengthMismatch(RoadCoderError):
    """Paired sequences differ in length."""


# evaluation
class EmptyMatrix(RoadCoderError):
    """Confusion matrix holds no counts."""


class SegmentMismatch(RoadCoderError):
    """Predictions and ground truth do not pair up by segment id."""


# imagery ingestion
class QuotaExceeded(RoadCoderError):
    """Imagery provider reported quota exhaustion."""


class NotEquirectangular(RoadCoderError):
    """Panorama buffer is not 2:1 equirectangular."""


class DegenerateFov(RoadCoderError):
    """Requested field of view is outside (0, 180) degrees."""
