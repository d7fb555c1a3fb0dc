from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from crash_recon.schemas.geometry import Point, RoadGeometry

MAX_SLOTS = 5
HORIZON = 5.0
K = 51
DT = 0.1

# Report fields whose completeness is tracked per vehicle
TRACKED_FIELDS = (
    "trajectory",
    "impact_area",
    "speed_limit",
    "pre_movement",
    "avoidance",
    "edr",
    "initial_lane",
)


def time_grid() -> np.ndarray:
    """Canonical pre-impact grid t_k = -5.0 + 0.1 k, k = 0..50"""
    return np.linspace(-HORIZON, 0.0, K)


class FieldStatus(str, Enum):
    PRESENT = "present"
    MISSING = "missing"
    UNKNOWN = "unknown"
    MALFORMED = "malformed"


class Lighting(str, Enum):
    DAYLIGHT = "daylight"
    DARK = "dark"
    DARK_LIGHTED = "dark-lighted"
    DAWN = "dawn"
    DUSK = "dusk"
    UNKNOWN = "unknown"


class Weather(str, Enum):
    CLEAR = "clear"
    RAIN = "rain"
    SNOW = "snow"
    FOG = "fog"
    OTHER = "other"
    UNKNOWN = "unknown"


class RoadCondition(str, Enum):
    DRY = "dry"
    WET = "wet"
    SNOW_ICE = "snow-ice"
    OTHER = "other"
    UNKNOWN = "unknown"


class Locality(str, Enum):
    URBAN = "urban"
    SUBURBAN = "suburban"
    RURAL = "rural"
    UNKNOWN = "unknown"


class VehicleCategory(str, Enum):
    PASSENGER = "passenger"
    SUV = "SUV"
    PICKUP = "pickup"
    VAN = "van"
    TRUCK = "truck"
    MOTORCYCLE = "motorcycle"
    OTHER = "other"
    UNKNOWN = "unknown"


class PreMovement(str, Enum):
    STRAIGHT = "straight"
    CURVE = "curve"
    TURN_LEFT = "turn-left"
    TURN_RIGHT = "turn-right"
    LANE_CHANGE = "lane-change"
    OVERTAKE = "overtake"
    U_TURN = "u-turn"
    STOPPED = "stopped"
    OTHER = "other"
    UNKNOWN = "unknown"


class Avoidance(str, Enum):
    NONE = "none"
    BRAKING = "braking"
    STEERING = "steering"
    BRAKING_AND_STEERING = "braking-and-steering"
    ACCELERATING = "accelerating"
    OTHER = "other"
    UNKNOWN = "unknown"


class ImpactSide(str, Enum):
    FRONT = "front"
    REAR = "rear"
    LEFT = "left"
    RIGHT = "right"
    UNKNOWN = "unknown"


class SceneSemantics(BaseModel):
    """Scene-level report fields"""
    summary_text: str = Field("", description="Free-text crash summary")
    crash_time: Optional[str] = Field(None, description="Local clock time HH:MM", examples=["17:45"])
    lighting: Lighting = Lighting.UNKNOWN
    weather: Weather = Weather.UNKNOWN
    road_condition: RoadCondition = RoadCondition.UNKNOWN
    locality: Locality = Locality.UNKNOWN

    model_config = ConfigDict(frozen=True)


class VehicleSemantics(BaseModel):
    """One participant slot of a case"""
    slot_index: int = Field(..., ge=0, lt=MAX_SLOTS)
    valid: bool = False
    category: VehicleCategory = VehicleCategory.UNKNOWN
    initial_lane: Optional[str] = Field(None, description="Lane centerline id, None when unknown")
    travel_direction: Optional[Point] = Field(None, description="Unit 2-vector, None when unknown")
    pre_movement: PreMovement = PreMovement.UNKNOWN
    avoidance: Avoidance = Avoidance.UNKNOWN
    speed_limit: Optional[float] = Field(None, ge=0, description="Posted speed limit (m/s)")
    description: str = Field("", description="Free-text vehicle narrative")
    status: Dict[str, FieldStatus] = Field(default_factory=dict, description="Completeness per tracked field")
    raw_fields: Dict[str, Any] = Field(default_factory=dict, description="Original text of malformed entries")

    model_config = ConfigDict(frozen=True)

    @field_validator("travel_direction")
    def validate_direction(cls, v):
        if v is not None and abs(float(np.hypot(*v)) - 1.0) > 1e-9:
            raise ValueError("travel_direction must have unit norm")
        return v

    def field_status(self, name: str) -> FieldStatus:
        return self.status.get(name, FieldStatus.MISSING)

    @classmethod
    def empty(cls, slot_index: int) -> "VehicleSemantics":
        return cls(slot_index=slot_index, valid=False)


class ImpactAnnotations(BaseModel):
    """Accident location, collision pair and impact sides"""
    accident_location: Optional[Point] = Field(None, description="Accident location in meters")
    collision_pair: Optional[Tuple[int, int]] = None
    impact_sides: List[ImpactSide] = Field(default_factory=lambda: [ImpactSide.UNKNOWN] * MAX_SLOTS)
    reported_collision_distance: Optional[float] = Field(None, ge=0)

    model_config = ConfigDict(frozen=True)

    @field_validator("impact_sides")
    def validate_sides(cls, v):
        if len(v) != MAX_SLOTS:
            raise ValueError(f"impact_sides needs {MAX_SLOTS} entries")
        return v


RawPoint = Tuple[float, float, Optional[float]]
EdrSample = Tuple[float, float]


class AccidentCase(BaseModel):
    """One reconstruction case: semantics, geometry, annotations, evidence"""
    case_id: str
    scene: SceneSemantics = Field(default_factory=SceneSemantics)
    vehicles: List[VehicleSemantics]
    geometry: RoadGeometry = Field(default_factory=RoadGeometry)
    annotations: ImpactAnnotations = Field(default_factory=ImpactAnnotations)
    raw_points: List[List[RawPoint]] = Field(default_factory=lambda: [[] for _ in range(MAX_SLOTS)])
    edr: List[Optional[List[EdrSample]]] = Field(default_factory=lambda: [None] * MAX_SLOTS)
    supervision: Optional[Any] = Field(None, exclude=True, description="DenseSupervision, attached by preprocess")

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_slots(self):
        if len(self.vehicles) != MAX_SLOTS:
            raise ValueError(f"a case carries exactly {MAX_SLOTS} vehicle slots")
        if [v.slot_index for v in self.vehicles] != list(range(MAX_SLOTS)):
            raise ValueError("vehicle slots must be ordered 0..4")
        if len(self.raw_points) != MAX_SLOTS or len(self.edr) != MAX_SLOTS:
            raise ValueError("per-vehicle evidence lists need one entry per slot")
        pair = self.annotations.collision_pair
        if pair is not None:
            i, j = pair
            if i == j or not self.vehicles[i].valid or not self.vehicles[j].valid:
                raise ValueError("collision_pair must reference two distinct valid slots")
        for samples in self.edr:
            if samples and any(t < -HORIZON - 1e-9 or t > 1e-9 for t, _ in samples):
                raise ValueError("EDR timestamps must lie within [-5, 0] s")
        return self

    def valid_slots(self) -> List[int]:
        return [v.slot_index for v in self.vehicles if v.valid]

    def __eq__(self, other):
        if not isinstance(other, AccidentCase):
            return NotImplemented
        return self.model_dump() == other.model_dump()

    __hash__ = None
