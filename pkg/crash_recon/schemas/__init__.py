from .case import (
    AccidentCase,
    Avoidance,
    FieldStatus,
    ImpactAnnotations,
    ImpactSide,
    PreMovement,
    SceneSemantics,
    VehicleCategory,
    VehicleSemantics,
)
from .geometry import AngleSource, GeometryFrame, Polyline, PolylineCategory, RigidTransform, RoadGeometry
from .metrics import CaseMetrics, MetricReport
from .synth import DegradationProfile, GroundTruth, ScenarioFamily, ScenarioSpec
