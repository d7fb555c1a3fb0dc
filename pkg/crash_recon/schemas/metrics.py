from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class CaseMetrics(BaseModel):
    """Per-case metric details, written to the per-case JSON"""
    case_id: str
    akd: Optional[float] = Field(None, description="Survey-keypoint AKD (m)")
    akd_all: Optional[float] = Field(None, description="All-step AKD (m)")
    per_vehicle_akd: List[float] = Field(default_factory=list)
    avd: Optional[float] = None
    avd_count: int = 0
    collision: Optional[bool] = None
    min_distance: Optional[float] = None
    threshold: Optional[float] = None
    contact_point: Optional[Tuple[float, float]] = None
    aapd_tan: Optional[float] = None
    aapd_norm: Optional[float] = None
    csa_match: Optional[bool] = None
    csa_status: str = Field("scored", description="scored | no_collision | unknown_side | no_pair")
    acc_error: Optional[float] = None
    curvature_error: Optional[float] = None


class MetricReport(BaseModel):
    """Aggregate metrics over an evaluated split"""
    label: str = Field("model", description="Configuration label for the CSV row")
    n_cases: int = 0
    akd: float = Field(0.0, ge=0)
    akd_all: float = Field(0.0, ge=0)
    avd: float = Field(0.0, ge=0)
    aapd_tan: float = Field(0.0, ge=0)
    aapd_norm: float = Field(0.0, ge=0)
    cr: float = Field(0.0, ge=0, le=100)
    csa: float = Field(0.0, ge=0, le=100)
    akd_variance: float = Field(0.0, ge=0)
    acc_error: float = Field(0.0, ge=0)
    curvature_error: float = Field(0.0, ge=0)
    per_vehicle_akd: List[float] = Field(default_factory=list)
    avd_excluded: int = 0
    csa_excluded: int = 0
    csa_no_collision: int = 0
    aapd_excluded: int = 0
    config: Dict[str, Any] = Field(default_factory=dict)

    def csv_row(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "n_cases": self.n_cases,
            "akd": self.akd,
            "akd_all": self.akd_all,
            "avd": self.avd,
            "aapd_tan": self.aapd_tan,
            "aapd_norm": self.aapd_norm,
            "cr": self.cr,
            "csa": self.csa,
            "akd_variance": self.akd_variance,
            "acc_error": self.acc_error,
            "curvature_error": self.curvature_error,
        }
