#!/usr/bin/env python3
"""
Exception hierarchy shared by every SparseNet module.
"""

from typing import Iterable, List


class SparseNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SparseNetError):
    """An op received tensors whose shapes violate its contract."""


class NonFiniteError(SparseNetError):
    """An op produced NaN or Inf values from finite inputs."""


class SpecValidationError(SparseNetError):
    """A NetworkSpec failed validation; carries every violation found."""

    def __init__(self, diagnostics: Iterable[str]):
        self.diagnostics: List[str] = list(diagnostics)
        super().__init__("invalid network spec: " + "; ".join(self.diagnostics))


class ConfigError(SparseNetError):
    """Malformed configuration file or unknown key."""


class CheckpointFormatError(SparseNetError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(SparseNetError):
    """The checkpoint file ended before all declared records were read."""


class CheckpointMismatchError(SparseNetError):
    """Checkpoint parameter names or shapes do not match the model."""

    def __init__(self, missing: Iterable[str] = (), extra: Iterable[str] = (),
                 shape: Iterable[str] = ()):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        self.shape = sorted(shape)
        parts = []
        if self.missing:
            parts.append(f"missing parameters: {', '.join(self.missing)}")
        if self.extra:
            parts.append(f"unexpected parameters: {', '.join(self.extra)}")
        if self.shape:
            parts.append(f"shape mismatch: {', '.join(self.shape)}")
        super().__init__("; ".join(parts) or "checkpoint does not match model")


class DatasetMissingError(SparseNetError):
    """A required dataset file is absent."""


class DatasetFormatError(SparseNetError):
    """A dataset file has a size that is not a whole number of records."""


class DatasetLabelError(SparseNetError):
    """A dataset record carries a label outside [0, class_count)."""


class ScheduleError(SparseNetError):
    """Learning-rate schedule misuse (bad milestones, epoch out of range)."""


class BudgetError(SparseNetError):
    """A parameter budget cannot be met even at path = 1."""


class ReportFormatError(SparseNetError):
    """Unknown analysis report format."""


class TrainingDivergedError(SparseNetError):
    """The training loss became NaN or Inf."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


class RunCancelledError(SparseNetError):
    """A background training run was cancelled between steps."""


class LabelRangeError(SparseNetError, ValueError):
    """A class label lies outside [0, num_classes)."""


class NormalizationError(SparseNetError, ValueError):
    """Normalization constants are unusable (wrong length or non-positive std)."""
