from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

Point = Tuple[float, float]

MIN_POINT_SPACING = 1e-6


class PolylineCategory(str, Enum):
    """Semantic class of a road curve; one raster channel each"""
    EDGE = "edge"
    MARKING = "marking"
    CENTERLINE = "centerline"
    CURB = "curb"
    OTHER = "other"


CATEGORY_ORDER = [c for c in PolylineCategory]


class GeometryFrame(str, Enum):
    RAW = "raw"
    WORLD = "world"
    NORTH_UP = "north_up"


class AngleSource(str, Enum):
    NORTH_ARROW = "north_arrow"
    DEFAULT_METADATA = "default_metadata"


class Polyline(BaseModel):
    """Ordered road curve with a semantic category"""
    id: str = Field(..., description="Curve identifier", examples=["lane-1"])
    category: PolylineCategory = Field(PolylineCategory.OTHER)
    points: List[Point] = Field(..., description="Ordered (x, y) in meters")

    model_config = ConfigDict(frozen=True)

    @field_validator("points")
    def validate_points(cls, v):
        if len(v) < 2:
            raise ValueError("a polyline needs at least 2 points")
        arr = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("polyline points must be finite")
        gaps = np.linalg.norm(np.diff(arr, axis=0), axis=1)
        if np.any(gaps <= MIN_POINT_SPACING):
            raise ValueError("consecutive polyline points coincide")
        return [(float(x), float(y)) for x, y in arr]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def ring_is_simple(ring: List[Point]) -> bool:
    """True when no two non-adjacent edges of a closed ring cross"""
    edges = list(zip(ring[:-1], ring[1:]))
    n = len(edges)
    for a in range(n):
        for b in range(a + 2, n):
            if a == 0 and b == n - 1:
                continue
            if _segments_cross(*edges[a], *edges[b]):
                return False
    return True


class RigidTransform(BaseModel):
    """Rotation + translation from the survey frame to the world frame"""
    rotation: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    translation: Point = (0.0, 0.0)

    model_config = ConfigDict(frozen=True)

    @classmethod
    def from_angle(cls, angle: float, translation: Point = (0.0, 0.0)) -> "RigidTransform":
        c, s = float(np.cos(angle)), float(np.sin(angle))
        return cls(rotation=((c, -s), (s, c)), translation=translation)

    def matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)


class RoadGeometry(BaseModel):
    """Road curves, lane centerlines and lane polygons of one scene"""
    curves: List[Polyline] = Field(default_factory=list)
    lane_centerlines: List[Polyline] = Field(default_factory=list)
    lane_polygons: List[List[Point]] = Field(default_factory=list)
    frame: GeometryFrame = GeometryFrame.RAW
    transform: Optional[RigidTransform] = Field(None, description="Survey-to-world transform, raw frame only")
    north_arrow: Optional[float] = Field(None, description="North angle read off a north arrow (rad)")
    north_metadata: Optional[float] = Field(None, description="North angle from scene metadata (rad)")
    north_angle: Optional[float] = Field(None, description="Angle applied by the north-up rotation (rad)")
    north_source: Optional[AngleSource] = None

    model_config = ConfigDict(frozen=True)

    @field_validator("lane_polygons")
    def validate_rings(cls, v):
        for ring in v:
            if len(ring) < 4 or tuple(ring[0]) != tuple(ring[-1]):
                raise ValueError("lane polygon rings must be closed with at least 3 distinct vertices")
            if not ring_is_simple(ring):
                raise ValueError("lane polygon rings must be simple")
        return v

    def lane(self, lane_id: str) -> Optional[Polyline]:
        for lane in self.lane_centerlines:
            if lane.id == lane_id:
                return lane
        return None

    def all_polylines(self) -> List[Polyline]:
        return list(self.curves) + list(self.lane_centerlines)

    def is_empty(self) -> bool:
        return not self.curves and not self.lane_centerlines
