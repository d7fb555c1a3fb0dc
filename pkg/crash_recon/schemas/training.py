from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0, description="Byte offset into the payload block")
    group: str


class CheckpointHeader(BaseModel):
    """JSON header of a parameter checkpoint"""
    format: str = "crash-recon-ckpt"
    version: int = 1
    stage: int = Field(0, ge=0, le=3)
    tensors: List[TensorEntry]
    hyperparameters: Dict[str, Any] = Field(default_factory=dict)


class StepRecord(BaseModel):
    """One JSON-lines record per optimizer step"""
    kind: str = "step"
    stage: int
    epoch: int
    step: int
    skipped: bool = False
    traj: float = 0.0
    pair: float = 0.0
    coll: float = 0.0
    spd: float = 0.0
    beh: float = 0.0
    limit: float = 0.0
    smooth: float = 0.0
    total: float = 0.0
    weights: Dict[str, float] = Field(default_factory=dict)
    counts: Dict[str, int] = Field(default_factory=dict)
    grad_norm: Optional[float] = None


class EpochRecord(BaseModel):
    kind: str = "epoch"
    stage: int
    epoch: int
    steps: int
    skipped: int
    mean_traj: float
    metrics: Dict[str, float] = Field(default_factory=dict)


class VehicleDiagnostics(BaseModel):
    slot: int
    lane_id: Optional[str] = None
    lane_candidates: List[str] = Field(default_factory=list)
    lane_probs: List[float] = Field(default_factory=list)
    tau: float
    gamma: float
    anchor_free: bool = False
    start: Tuple[float, float]


class ReconstructionDiagnostics(BaseModel):
    """JSON block written next to the per-vehicle CSV of a reconstruction"""
    case_id: str
    vehicles: List[VehicleDiagnostics]
    pair: Optional[Tuple[int, int]] = None
    pair_refined: bool = False
    pair_gate: List[float] = Field(default_factory=list)
    anchor_offset: Optional[Tuple[float, float]] = None
    anchor_gates: Dict[str, List[float]] = Field(default_factory=dict)
    flags: List[str] = Field(default_factory=list)
