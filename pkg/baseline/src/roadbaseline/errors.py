"""Exception types for the baseline trainer.

Each contract violation gets its own class so the CLI can map errors to
exit codes without string matching.
"""

from __future__ import annotations


class BaselineError(Exception):
    """Base class for all trainer errors."""


class FormatError(BaselineError):
    """A manifest, split, or codebook file does not match its schema."""


class SpecInvalid(BaselineError):
    """Model specification conflicts with the codebook or with itself."""


class EmptySplit(BaselineError):
    """Training or validation bucket resolves to zero usable images."""


class LabelMissing(BaselineError):
    """An image selected for training lacks ground truth for a head."""


class CheckpointMismatch(BaselineError):
    """Checkpoint was trained against a different codebook version."""


class OutOfMemory(BaselineError):
    """Device memory exhausted; message carries mitigation guidance."""
