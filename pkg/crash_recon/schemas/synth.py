from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ScenarioFamily(str, Enum):
    """Synthetic accident configurations"""
    REAR_END_STRAIGHT = "rear_end_straight"
    LEFT_TURN_ACROSS_PATH = "left_turn_across_path"
    LANE_CHANGE_SIDESWIPE = "lane_change_sideswipe"
    HEAD_ON_CURVE = "head_on_curve"


class FieldRates(BaseModel):
    """Per-field probabilities of each degradation category"""
    missing: float = Field(0.0, ge=0, le=1)
    unknown: float = Field(0.0, ge=0, le=1)
    malformed: float = Field(0.0, ge=0, le=1)

    @model_validator(mode="after")
    def check_total(self):
        if self.missing + self.unknown + self.malformed > 1.0 + 1e-12:
            raise ValueError("degradation rates of one field must sum to at most 1")
        return self


def _table_rates() -> Dict[str, FieldRates]:
    # Training-split missingness of the reference corpus, in fractions
    return {
        "trajectory": FieldRates(missing=0.0598),
        "impact_area": FieldRates(unknown=0.0095),
        "speed_limit": FieldRates(missing=0.0297, unknown=0.0075, malformed=0.0062),
        "pre_movement": FieldRates(missing=0.0297, unknown=0.0007),
        "avoidance": FieldRates(missing=0.0297, unknown=0.3495),
        "initial_lane": FieldRates(missing=0.0297, unknown=0.0015, malformed=0.0005),
    }


class DegradationProfile(BaseModel):
    """How a full-ground-truth case is turned into a report-like case"""
    survey_min: int = Field(4, ge=2, description="Fewest surveyed trajectory points")
    survey_max: int = Field(8, ge=2, description="Most surveyed trajectory points")
    survey_noise: float = Field(0.1, ge=0, description="Survey position noise sigma (m)")
    edr_missing: float = Field(0.5903, ge=0, le=1)
    edr_min: int = Field(3, ge=1)
    edr_max: int = Field(10, ge=1)
    field_rates: Dict[str, FieldRates] = Field(default_factory=_table_rates)

    @model_validator(mode="after")
    def check_ranges(self):
        if self.survey_min > self.survey_max:
            raise ValueError("survey_min must not exceed survey_max")
        if self.edr_min > self.edr_max:
            raise ValueError("edr_min must not exceed edr_max")
        return self

    @classmethod
    def zero(cls) -> "DegradationProfile":
        """Profile that only subsamples, never drops fields"""
        return cls(edr_missing=0.0, field_rates={})

    def rates(self, field: str) -> FieldRates:
        return self.field_rates.get(field, FieldRates())


class ScenarioSpec(BaseModel):
    """Parameters of one synthetic scene"""
    family: ScenarioFamily
    seed: int = Field(..., ge=0)
    lane_count: int = Field(2, ge=1, le=4)
    lane_width: float = Field(3.6, ge=2.5, le=5.0)
    curve_radius: float = Field(60.0, ge=15.0)
    speeds: Tuple[float, float] = Field(..., description="Pre-avoidance speeds of the collision pair (m/s)")
    initial_gap: Optional[float] = Field(None, gt=0, description="Rear-end only: initial along-lane gap (m)")
    avoidance_decel: float = Field(3.0, ge=0, le=9.0, description="Braking deceleration (m/s^2)")
    avoidance_onset: float = Field(-1.5, ge=-4.5, le=-0.3, description="Onset of avoidance (s)")
    third_vehicle: bool = False
    speed_limit: float = Field(15.6, ge=5.0, le=40.0)

    model_config = ConfigDict(frozen=True)

    @field_validator("speeds")
    def validate_speeds(cls, v):
        for s in v:
            if s < 3.0 or s > 35.0:
                raise ValueError("speeds must lie within 3-35 m/s")
        return v


class GroundTruth(BaseModel):
    """Sealed evaluation-only truth for a synthetic case"""
    case_id: str
    family: ScenarioFamily
    positions: List[List[Tuple[float, float]]] = Field(..., description="5 slots x 51 steps, empty for invalid slots")
    speeds: List[List[float]]
    headings: List[List[float]]
    tau: List[Optional[float]] = Field(..., description="Avoidance onset per slot (s)")
    contact_point: Tuple[float, float]
    collision_pair: Tuple[int, int]
    impact_sides: List[str]
    survey_steps: List[List[int]] = Field(default_factory=lambda: [[] for _ in range(5)],
                                          description="Grid steps of the surveyed points kept by degradation")
