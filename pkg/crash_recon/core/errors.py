"""Exception hierarchy shared by every crash_recon module."""

from typing import Optional


class CrashReconError(Exception):
    """Base class for all errors raised by crash_recon"""


class CaseParseError(CrashReconError, ValueError):
    """Case document is not valid JSON"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CaseSchemaError(CrashReconError, ValueError):
    """Case document violates a schema rule that cannot be degraded to unknown"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyInputError(CrashReconError, ValueError):
    """An operation received an empty collection"""


class GeometryValidationError(CrashReconError, ValueError):
    """Geometry or transform violates its preconditions"""


class CurveFitError(CrashReconError, ValueError):
    """Reference curve cannot be fitted to the given points"""


class EdrUnavailableError(CrashReconError):
    """No EDR observations; the caller should fall back to the speed prior"""


class UnsupervisedSpeedError(CrashReconError):
    """Neither EDR nor a speed limit is known for a vehicle"""


class ShapeError(CrashReconError, ValueError):
    """Tensor operands have incompatible shapes"""

    def __init__(self, op: str, *shapes):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = shapes


class NonFiniteLossError(CrashReconError):
    """Loss or gradient is NaN/Inf"""


class NoLanesError(CrashReconError):
    """Scene has no lane centerlines; decoding falls back to the dense branch"""


class MissingKeypointsError(CrashReconError, ValueError):
    """A keypoint-based metric was asked to score zero keypoints"""


class ReferenceDirectionError(CrashReconError, ValueError):
    """No reference direction can be derived for the accident-point decomposition"""


class InfeasibleScenarioError(CrashReconError, ValueError):
    """Scenario parameters cannot produce a contact within the horizon"""

    def __init__(self, constraint: str, detail: Optional[str] = None):
        message = f"infeasible scenario: {constraint}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.constraint = constraint


class CheckpointError(CrashReconError, ValueError):
    """Checkpoint container is unreadable or incompatible"""


class TrainingAbortedError(CrashReconError):
    """Too many batches were skipped within one epoch"""
