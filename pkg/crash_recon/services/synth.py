"""
Synthetic accident corpus.

Each scene is built backward from a contact at t = 0: every vehicle moves
along a fixed path with a closed-form arc-length profile (constant speed,
optionally followed by constant braking from its avoidance onset). The
full-evidence case is then degraded into a report-like case: a handful of
noisy survey points, sparse or missing EDR samples and incomplete semantic
fields. Ground truth is kept in a sealed sidecar read only by evaluation.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq

from crash_recon.core.config import SupervisionSettings, SynthSettings
from crash_recon.core.errors import InfeasibleScenarioError
from crash_recon.crud.base import write_manifest
from crash_recon.crud.case import case_crud
from crash_recon.crud.truth import truth_crud
from crash_recon.schemas.case import (
    HORIZON,
    K,
    MAX_SLOTS,
    AccidentCase,
    Avoidance,
    FieldStatus,
    ImpactAnnotations,
    ImpactSide,
    Lighting,
    Locality,
    PreMovement,
    RoadCondition,
    SceneSemantics,
    TRACKED_FIELDS,
    VehicleCategory,
    VehicleSemantics,
    Weather,
    time_grid,
)
from crash_recon.schemas.geometry import GeometryFrame, Polyline, PolylineCategory, RoadGeometry
from crash_recon.schemas.synth import DegradationProfile, FieldRates, GroundTruth, ScenarioFamily, ScenarioSpec
from crash_recon.services.geometry import cumulative_length, nearest_on_segments, point_at_arc, side_bucket
from crash_recon.services.robustness import blank_field
from crash_recon.services.supervision import DenseSupervision, build_supervision

logger = logging.getLogger(__name__)

LEAD = 200.0  # road length on either side of the conflict area (m)
CONTACT_GAP = 3.0  # center distance of front/rear contacts at t = 0 (m)
SIDE_OFFSET = (1.5, 2.0)  # through-vehicle offset from the turning vehicle at contact (m)
SIDESWIPE_GAP = 2.0
TURN_RADIUS = 15.0
CONTACT_LIMIT = 4.572  # 15 ft
MIN_CONTACT_SPEED = 1.0
PATH_SPACING = 0.25
MAP_SPACING = 2.0
HEADING_STEP = 0.05

CATEGORIES = [VehicleCategory.PASSENGER, VehicleCategory.SUV, VehicleCategory.PICKUP, VehicleCategory.VAN]
SPEED_LIMITS = [11.18, 13.41, 15.65, 17.88, 20.12, 24.59]  # 25-55 mph

# Original text stored for malformed entries, by status key
MALFORMED_TEXT = {
    "trajectory": "see sketch",
    "impact_area": "front-ish",
    "speed_limit": "fast",
    "pre_movement": "unclear",
    "avoidance": "n/a?",
    "initial_lane": "lane-x",
}

# Degradable semantic fields, drawn in this order for every vehicle
DEGRADED_FIELDS = ("impact_area", "speed_limit", "pre_movement", "avoidance", "initial_lane")


# ---- path construction ----------------------------------------------------

def _straight(a: Sequence[float], b: Sequence[float], spacing: float = PATH_SPACING) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    return a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)


def _arc(center: Sequence[float], radius: float, start: float, sweep: float,
         spacing: float = PATH_SPACING) -> np.ndarray:
    n = max(2, int(math.ceil(abs(sweep) * radius / spacing)) + 1)
    angles = start + sweep * np.linspace(0.0, 1.0, n)
    return np.asarray(center, dtype=float) + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _join(*parts: np.ndarray) -> np.ndarray:
    return np.concatenate([parts[0]] + [p[1:] for p in parts[1:]], axis=0)


def _left_normals(points: np.ndarray) -> np.ndarray:
    d = np.gradient(points, axis=0)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.stack([-d[:, 1], d[:, 0]], axis=1)


def _offset(points: np.ndarray, distance) -> np.ndarray:
    """Shift a path sideways; positive distances go to the left of the travel direction"""
    return points + np.asarray(distance, dtype=float).reshape(-1, 1) * _left_normals(points)


def _thin(points: np.ndarray, spacing: float = MAP_SPACING) -> np.ndarray:
    """Keep roughly one point per ``spacing`` meters, endpoints included"""
    cum = cumulative_length(points)
    bins = np.floor(cum / spacing)
    keep = np.flatnonzero(np.diff(bins, prepend=-1.0) > 0)
    if keep[-1] != len(points) - 1:
        if cum[-1] - cum[keep[-1]] < 0.5 * spacing and len(keep) > 1:
            keep = keep[:-1]
        keep = np.append(keep, len(points) - 1)
    return points[keep]


def _arc_of(points: np.ndarray, q: Sequence[float]) -> float:
    """Arc length of the foot point of q on a path"""
    dist, t, d = nearest_on_segments(np.asarray(q, dtype=float), points)
    i = int(np.argmin(dist))
    return float(cumulative_length(points)[i] + t[i] * np.linalg.norm(d[i]))


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


# ---- kinematics -----------------------------------------------------------

@dataclass
class Motion:
    """
    One vehicle moving along ``path``, reaching ``end_arc`` at t = 0.
    Speed is ``speed`` until ``onset``, then decreases at ``decel``.
    """
    path: np.ndarray
    end_arc: float
    speed: float
    lane_id: str
    pre_movement: PreMovement
    avoidance: Avoidance
    decel: float = 0.0
    onset: Optional[float] = None
    tau: Optional[float] = None

    def contact_speed(self) -> float:
        if self.onset is None:
            return self.speed
        return self.speed + self.decel * self.onset

    def speeds(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.onset is None:
            return np.full(t.shape, self.speed)
        return np.where(t < self.onset, self.speed, self.speed - self.decel * (t - self.onset))

    def distance(self, t: np.ndarray) -> np.ndarray:
        """Distance still to travel from time t to the contact"""
        t = np.asarray(t, dtype=float)
        if self.onset is None:
            return -self.speed * t
        tau = self.onset
        late = -self.speed * t - 0.5 * self.decel * (tau ** 2 - (t - tau) ** 2)
        at_onset = -self.speed * tau - 0.5 * self.decel * tau ** 2
        return np.where(t < tau, at_onset + self.speed * (tau - t), late)

    def arcs(self, t: np.ndarray) -> np.ndarray:
        return self.end_arc - self.distance(t)

    def positions(self, t: np.ndarray) -> np.ndarray:
        return point_at_arc(self.path, self.arcs(t))

    def headings(self, t: np.ndarray) -> np.ndarray:
        s = self.arcs(t)
        d = point_at_arc(self.path, s + HEADING_STEP) - point_at_arc(self.path, s - HEADING_STEP)
        return np.arctan2(d[:, 1], d[:, 0])


def braking_motion(path: np.ndarray, end_arc: float, speed: float, decel: float, onset: float,
                   lane_id: str, pre_movement: PreMovement) -> Motion:
    """Constant speed, then constant deceleration from ``onset`` to the contact"""
    if decel <= 0.0:
        return Motion(path, end_arc, speed, lane_id, pre_movement, Avoidance.NONE)
    motion = Motion(path, end_arc, speed, lane_id, pre_movement, Avoidance.BRAKING, decel, onset, onset)
    if motion.contact_speed() < MIN_CONTACT_SPEED:
        raise InfeasibleScenarioError(
            "speed stays positive through braking",
            f"{speed:.1f} m/s braking at {decel:.1f} m/s^2 for {-onset:.2f} s",
        )
    return motion


@dataclass
class Layout:
    lanes: Dict[str, np.ndarray]
    curves: List[Polyline]
    motions: List[Motion]
    summary: str


def _polyline(id: str, points: np.ndarray, category: PolylineCategory) -> Polyline:
    return Polyline(id=id, category=category, points=[tuple(p) for p in _thin(points)])


def _straight_road(spec: ScenarioSpec) -> Tuple[Dict[str, np.ndarray], List[Polyline]]:
    """``lane_count`` eastbound lanes at y = k w and one westbound lane at y = -w"""
    w, n = spec.lane_width, spec.lane_count
    lanes = {f"lane-{k}": _straight((-LEAD, k * w), (LEAD, k * w)) for k in range(n)}
    lanes["lane-w"] = _straight((LEAD, -w), (-LEAD, -w))
    curves = [
        _polyline("edge-s", _straight((-LEAD, -1.5 * w), (LEAD, -1.5 * w)), PolylineCategory.EDGE),
        _polyline("edge-n", _straight((-LEAD, (n - 0.5) * w), (LEAD, (n - 0.5) * w)), PolylineCategory.EDGE),
        _polyline("center", _straight((-LEAD, -0.5 * w), (LEAD, -0.5 * w)), PolylineCategory.MARKING),
    ]
    for k in range(1, n):
        y = (k - 0.5) * w
        curves.append(_polyline(f"marking-{k}", _straight((-LEAD, y), (LEAD, y)), PolylineCategory.MARKING))
    return lanes, curves


def _third_vehicle(lanes: Dict[str, np.ndarray], lane_id: str, end: Sequence[float], speed: float) -> Motion:
    path = lanes[lane_id]
    return Motion(path, _arc_of(path, end), speed, lane_id, PreMovement.STRAIGHT, Avoidance.NONE)


def rear_end_straight(spec: ScenarioSpec) -> Layout:
    """Follower (slot 0) runs into the leader (slot 1) in lane 0"""
    lanes, curves = _straight_road(spec)
    v_f, v_l = spec.speeds
    if v_f <= v_l:
        raise InfeasibleScenarioError("follower faster than leader", f"{v_f:.1f} <= {v_l:.1f} m/s")
    decel, onset = spec.avoidance_decel, spec.avoidance_onset
    if spec.initial_gap is not None:
        closure = (v_f - v_l) * HORIZON
        excess = closure - spec.initial_gap
        if excess < 0.0:
            raise InfeasibleScenarioError(
                "relative closure covers the initial gap",
                f"{v_f - v_l:.1f} m/s x {HORIZON:.0f} s = {closure:.1f} m < {spec.initial_gap:.1f} m",
            )
        if decel <= 0.0:
            if excess > 1e-6:
                raise InfeasibleScenarioError("braking absorbs the excess closure", "deceleration is zero")
        else:
            onset = -math.sqrt(2.0 * excess / decel)
            if onset < -HORIZON:
                raise InfeasibleScenarioError("braking onset within the horizon", f"onset {onset:.2f} s")
    path = lanes["lane-0"]
    follower = braking_motion(path, LEAD, v_f, decel, onset, "lane-0", PreMovement.STRAIGHT)
    if follower.contact_speed() <= v_l:
        raise InfeasibleScenarioError(
            "follower still closing at contact", f"{follower.contact_speed():.1f} <= {v_l:.1f} m/s"
        )
    leader = Motion(path, LEAD + CONTACT_GAP, v_l, "lane-0", PreMovement.STRAIGHT, Avoidance.NONE)
    motions = [follower, leader]
    if spec.third_vehicle:
        motions.append(_third_vehicle(lanes, "lane-w", (-60.0, -spec.lane_width), spec.speed_limit))
    return Layout(lanes, curves, motions, "V1 struck the rear of V2 while both were travelling in the same lane.")


def lane_change_sideswipe(spec: ScenarioSpec) -> Layout:
    """Slot 0 changes from lane 0 toward lane 1 and sideswipes slot 1"""
    if spec.lane_count < 2:
        raise InfeasibleScenarioError("two same-direction lanes", f"lane_count {spec.lane_count}")
    lanes, curves = _straight_road(spec)
    w = spec.lane_width
    v0, v1 = spec.speeds
    onset = spec.avoidance_onset
    u_c = brentq(lambda u: u * u * (3.0 - 2.0 * u) - (w - SIDESWIPE_GAP) / w, 0.0, 1.0)
    travel = v0 * -onset
    x_a = -travel
    length = travel / u_c
    xs = np.arange(-LEAD, LEAD + PATH_SPACING, PATH_SPACING)
    path = np.stack([xs, w * _smoothstep((xs - x_a) / length)], axis=1)
    end = np.array([0.0, w * _smoothstep(np.array([u_c]))[0]])
    end_arc = _arc_of(path, end)
    start_arc = _arc_of(path, (x_a, 0.0))
    changer = Motion(path, end_arc, v0, "lane-0", PreMovement.LANE_CHANGE, Avoidance.NONE,
                     tau=-(end_arc - start_arc) / v0)
    through = braking_motion(lanes["lane-1"], LEAD, v1, spec.avoidance_decel, onset, "lane-1", PreMovement.STRAIGHT)
    motions = [changer, through]
    if spec.third_vehicle:
        motions.append(_third_vehicle(lanes, "lane-w", (-60.0, -w), spec.speed_limit))
    return Layout(lanes, curves, motions, "V1 changed lanes to the left and sideswiped V2 travelling in the adjacent lane.")


def left_turn_across_path(spec: ScenarioSpec) -> Layout:
    """Slot 0 turns left from the eastbound approach across the westbound slot 1"""
    w = spec.lane_width
    lanes = {
        "lane-eb": _straight((-LEAD, -w / 2), (LEAD, -w / 2)),
        "lane-wb": _straight((LEAD, w / 2), (-LEAD, w / 2)),
        "lane-nb": _straight((w / 2, -LEAD), (w / 2, LEAD)),
        "lane-sb": _straight((-w / 2, LEAD), (-w / 2, -LEAD)),
    }
    curves = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            corner = np.array([[sx * LEAD, sy * w], [sx * w, sy * w], [sx * w, sy * LEAD]])
            curves.append(Polyline(id=f"edge-{'e' if sx > 0 else 'w'}{'n' if sy > 0 else 's'}",
                                   category=PolylineCategory.EDGE, points=[tuple(p) for p in corner]))
    curves += [
        Polyline(id="center-w", category=PolylineCategory.MARKING, points=[(-LEAD, 0.0), (-w, 0.0)]),
        Polyline(id="center-e", category=PolylineCategory.MARKING, points=[(w, 0.0), (LEAD, 0.0)]),
        Polyline(id="center-s", category=PolylineCategory.MARKING, points=[(0.0, -LEAD), (0.0, -w)]),
        Polyline(id="center-n", category=PolylineCategory.MARKING, points=[(0.0, w), (0.0, LEAD)]),
    ]
    x_turn = w / 2 - TURN_RADIUS
    center = (x_turn, -w / 2 + TURN_RADIUS)
    path = _join(
        _straight((-LEAD, -w / 2), (x_turn, -w / 2)),
        _arc(center, TURN_RADIUS, -np.pi / 2, np.pi / 2),
        _straight((w / 2, -w / 2 + TURN_RADIUS), (w / 2, LEAD)),
    )
    phi = math.acos(1.0 - (w - SIDE_OFFSET[1]) / TURN_RADIUS)
    end_arc = (x_turn + LEAD) + TURN_RADIUS * phi
    contact = point_at_arc(path, np.array([end_arc]))[0]
    turning = Motion(path, end_arc, spec.speeds[0], "lane-eb", PreMovement.TURN_LEFT, Avoidance.NONE)
    through_path = lanes["lane-wb"]
    through_end = (contact[0] + SIDE_OFFSET[0], w / 2)
    through = braking_motion(through_path, _arc_of(through_path, through_end), spec.speeds[1],
                             spec.avoidance_decel, spec.avoidance_onset, "lane-wb", PreMovement.STRAIGHT)
    motions = [turning, through]
    if spec.third_vehicle:
        motions.append(_third_vehicle(lanes, "lane-sb", (-w / 2, -40.0), spec.speed_limit))
    return Layout(lanes, curves, motions, "V1 turned left across the path of oncoming V2 at the intersection.")


def head_on_curve(spec: ScenarioSpec) -> Layout:
    """Slot 0 drifts over the centerline in a left-hand curve into oncoming slot 1"""
    w, radius = spec.lane_width, spec.curve_radius
    centerline = _join(
        _straight((-LEAD, 0.0), (0.0, 0.0)),
        _arc((0.0, radius), radius, -np.pi / 2, np.pi / 2),
        _straight((radius, radius), (radius, radius + LEAD)),
    )
    cum = cumulative_length(centerline)
    lanes = {
        "lane-a": _offset(centerline, -w / 2),
        "lane-b": _offset(centerline, w / 2)[::-1].copy(),
    }
    curves = [
        _polyline("edge-outer", _offset(centerline, -w), PolylineCategory.EDGE),
        _polyline("edge-inner", _offset(centerline, w), PolylineCategory.EDGE),
        _polyline("center", centerline, PolylineCategory.MARKING),
    ]
    v0, v1 = spec.speeds
    s_c = LEAD + radius * np.pi / 4
    s_a = s_c - v0 * -spec.avoidance_onset
    lateral = -w / 2 + w * _smoothstep((cum - s_a) / (s_c - s_a))
    path = _offset(centerline, lateral)
    normals = _left_normals(centerline)
    end = point_at_arc(centerline, np.array([s_c]))[0] + (w / 2) * normals[int(np.searchsorted(cum, s_c))]
    end_arc = _arc_of(path, end)
    start = point_at_arc(centerline, np.array([s_a]))[0] - (w / 2) * normals[int(np.searchsorted(cum, s_a))]
    drifter = Motion(path, end_arc, v0, "lane-a", PreMovement.CURVE, Avoidance.NONE,
                     tau=-(end_arc - _arc_of(path, start)) / v0)
    contact = point_at_arc(path, np.array([end_arc]))[0]
    oncoming_path = lanes["lane-b"]
    oncoming = braking_motion(oncoming_path, _arc_of(oncoming_path, contact) - CONTACT_GAP, v1,
                              spec.avoidance_decel, spec.avoidance_onset, "lane-b", PreMovement.CURVE)
    motions = [drifter, oncoming]
    if spec.third_vehicle:
        lane = lanes["lane-a"]
        ahead = point_at_arc(lane, np.array([_arc_of(lane, contact) + 30.0]))[0]
        motions.append(_third_vehicle(lanes, "lane-a", ahead, spec.speed_limit))
    return Layout(lanes, curves, motions, "V1 crossed the centerline in a curve and collided head-on with V2.")


FAMILIES = {
    ScenarioFamily.REAR_END_STRAIGHT: rear_end_straight,
    ScenarioFamily.LEFT_TURN_ACROSS_PATH: left_turn_across_path,
    ScenarioFamily.LANE_CHANGE_SIDESWIPE: lane_change_sideswipe,
    ScenarioFamily.HEAD_ON_CURVE: head_on_curve,
}


# ---- scene assembly -------------------------------------------------------

@dataclass
class SyntheticScene:
    """A full-evidence case and its ground truth"""
    spec: ScenarioSpec
    case: AccidentCase
    truth: GroundTruth

    def supervision(self, settings: Optional[SupervisionSettings] = None) -> DenseSupervision:
        return build_supervision(self.case, settings)


def _heading_vector(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def generate(spec: ScenarioSpec, case_id: Optional[str] = None) -> SyntheticScene:
    """
    Build one scene with exact ground truth
    :raises InfeasibleScenarioError: when the parameters cannot produce the contact
    """
    case_id = case_id or f"synth-{spec.family.value}-{spec.seed}"
    rng = np.random.default_rng(spec.seed)
    layout = FAMILIES[spec.family](spec)
    t = time_grid()
    positions = [m.positions(t) for m in layout.motions]
    speeds = [m.speeds(t) for m in layout.motions]
    headings = [m.headings(t) for m in layout.motions]
    for slot, m in enumerate(layout.motions):
        if m.distance(np.array([-HORIZON]))[0] > m.end_arc:
            raise InfeasibleScenarioError("path covers the horizon", f"slot {slot} starts before its path")
    gap = float(np.linalg.norm(positions[0][-1] - positions[1][-1]))
    if gap > CONTACT_LIMIT:
        raise InfeasibleScenarioError("pair distance at contact", f"{gap:.2f} m > {CONTACT_LIMIT} m")
    contact = 0.5 * (positions[0][-1] + positions[1][-1])

    sides = [ImpactSide.UNKNOWN] * MAX_SLOTS
    for own, other in ((0, 1), (1, 0)):
        sides[own] = side_bucket(_heading_vector(headings[own][-1]), positions[other][-1] - positions[own][-1])

    vehicles = [VehicleSemantics.empty(n) for n in range(MAX_SLOTS)]
    raw_points: List[list] = [[] for _ in range(MAX_SLOTS)]
    edr: List[Optional[list]] = [None] * MAX_SLOTS
    for slot, m in enumerate(layout.motions):
        direction = _heading_vector(headings[slot][0])
        status = {key: FieldStatus.PRESENT for key in TRACKED_FIELDS}
        status["category"] = FieldStatus.PRESENT
        status["travel_direction"] = FieldStatus.PRESENT
        if slot >= 2:
            status["impact_area"] = FieldStatus.UNKNOWN
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        vehicles[slot] = VehicleSemantics(
            slot_index=slot,
            valid=True,
            category=category,
            initial_lane=m.lane_id,
            travel_direction=(float(direction[0]), float(direction[1])),
            pre_movement=m.pre_movement,
            avoidance=m.avoidance,
            speed_limit=spec.speed_limit,
            description=f"V{slot + 1} ({category.value}) {m.pre_movement.value}, avoidance {m.avoidance.value}.",
            status=status,
        )
        raw_points[slot] = [(float(x), float(y), float(th)) for (x, y), th in zip(positions[slot], headings[slot])]
        edr[slot] = _edr_samples(m, np.arange(K))

    geometry = RoadGeometry(
        curves=layout.curves,
        lane_centerlines=[_polyline(id, pts, PolylineCategory.CENTERLINE) for id, pts in layout.lanes.items()],
        frame=GeometryFrame.NORTH_UP,
        north_angle=0.0,
    )
    hour, minute = int(rng.integers(24)), int(rng.integers(60))
    scene = SceneSemantics(
        summary_text=layout.summary,
        crash_time=f"{hour:02d}:{minute:02d}",
        lighting=[Lighting.DAYLIGHT, Lighting.DARK, Lighting.DARK_LIGHTED, Lighting.DUSK][int(rng.integers(4))],
        weather=[Weather.CLEAR, Weather.RAIN, Weather.FOG][int(rng.integers(3))],
        road_condition=[RoadCondition.DRY, RoadCondition.WET][int(rng.integers(2))],
        locality=[Locality.URBAN, Locality.SUBURBAN, Locality.RURAL][int(rng.integers(3))],
    )
    case = AccidentCase(
        case_id=case_id,
        scene=scene,
        vehicles=vehicles,
        geometry=geometry,
        annotations=ImpactAnnotations(
            accident_location=(float(contact[0]), float(contact[1])),
            collision_pair=(0, 1),
            impact_sides=sides,
        ),
        raw_points=raw_points,
        edr=edr,
    )
    n = len(layout.motions)
    truth = GroundTruth(
        case_id=case_id,
        family=spec.family,
        positions=[[tuple(p) for p in positions[s].tolist()] if s < n else [] for s in range(MAX_SLOTS)],
        speeds=[speeds[s].tolist() if s < n else [] for s in range(MAX_SLOTS)],
        headings=[headings[s].tolist() if s < n else [] for s in range(MAX_SLOTS)],
        tau=[layout.motions[s].tau if s < n else None for s in range(MAX_SLOTS)],
        contact_point=(float(contact[0]), float(contact[1])),
        collision_pair=(0, 1),
        impact_sides=[s.value for s in sides],
        survey_steps=[list(range(K)) if s < n else [] for s in range(MAX_SLOTS)],
    )
    return SyntheticScene(spec, case, truth)


def _edr_samples(motion: Motion, steps: np.ndarray) -> List[Tuple[float, float]]:
    t = np.round(time_grid()[steps], 6)
    return [(float(ti), float(v)) for ti, v in zip(t, motion.speeds(t))]


# ---- degradation ----------------------------------------------------------

def draw_status(rng: np.random.Generator, rates: FieldRates) -> FieldStatus:
    u = rng.random()
    if u < rates.missing:
        return FieldStatus.MISSING
    if u < rates.missing + rates.unknown:
        return FieldStatus.UNKNOWN
    if u < rates.missing + rates.unknown + rates.malformed:
        return FieldStatus.MALFORMED
    return FieldStatus.PRESENT


def draw_edr_count(rng: np.random.Generator, profile: DegradationProfile) -> Optional[int]:
    """Number of EDR samples kept, None when the recorder is missing"""
    if rng.random() < profile.edr_missing:
        return None
    return int(rng.integers(profile.edr_min, min(profile.edr_max, K) + 1))


def survey_steps(rng: np.random.Generator, count: int) -> List[int]:
    """``count`` increasing grid steps ending at the impact, one per equal-width bin before it"""
    bins = np.linspace(0, K - 3, count, dtype=int)
    steps = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        steps.append(int(lo + rng.integers(0, max(1, hi - lo - 1))))
    return steps + [K - 1]


def degrade(scene: SyntheticScene, profile: DegradationProfile,
            rng: np.random.Generator) -> Tuple[AccidentCase, GroundTruth]:
    """
    Turn a full-evidence scene into a report-like case
    :return: degraded case and the ground truth with the kept survey steps
    """
    case, truth = scene.case, scene.truth
    vehicles = list(case.vehicles)
    sides = list(case.annotations.impact_sides)
    raw_points: List[list] = [[] for _ in range(MAX_SLOTS)]
    edr: List[Optional[list]] = [None] * MAX_SLOTS
    kept_steps: List[List[int]] = [[] for _ in range(MAX_SLOTS)]
    for slot in case.valid_slots():
        vehicle = vehicles[slot]
        full = case.raw_points[slot]
        status = draw_status(rng, profile.rates("trajectory"))
        if status == FieldStatus.PRESENT:
            count = int(rng.integers(profile.survey_min, profile.survey_max + 1))
            steps = survey_steps(rng, count)
            noise = rng.normal(0.0, profile.survey_noise, size=(len(steps), 2))
            raw_points[slot] = [(full[k][0] + float(dx), full[k][1] + float(dy), full[k][2])
                                for k, (dx, dy) in zip(steps, noise)]
            kept_steps[slot] = steps
        else:
            vehicle = blank_field(vehicle, "trajectory", status, MALFORMED_TEXT["trajectory"])

        count = draw_edr_count(rng, profile)
        if count is None:
            vehicle = blank_field(vehicle, "edr", FieldStatus.MISSING)
        else:
            steps = np.sort(rng.choice(K, size=count, replace=False))
            samples = case.edr[slot]
            edr[slot] = [samples[k] for k in steps]

        for key in DEGRADED_FIELDS:
            status = draw_status(rng, profile.rates(key))
            if status == FieldStatus.PRESENT or vehicle.field_status(key) != FieldStatus.PRESENT:
                continue
            vehicle = blank_field(vehicle, key, status, MALFORMED_TEXT[key])
            if key == "impact_area":
                sides[slot] = ImpactSide.UNKNOWN
        vehicles[slot] = vehicle

    degraded = case.model_copy(update={
        "vehicles": vehicles,
        "annotations": case.annotations.model_copy(update={"impact_sides": sides}),
        "raw_points": raw_points,
        "edr": edr,
    })
    return degraded, truth.model_copy(update={"survey_steps": kept_steps})


# ---- corpus ---------------------------------------------------------------

def sample_spec(family: ScenarioFamily, rng: np.random.Generator, third_vehicle_prob: float = 0.3) -> ScenarioSpec:
    """Draw scene parameters within the documented physical ranges"""
    if family == ScenarioFamily.REAR_END_STRAIGHT:
        leader = rng.uniform(5.0, 15.0)
        speeds = (min(35.0, leader + rng.uniform(6.0, 15.0)), leader)
    elif family == ScenarioFamily.LEFT_TURN_ACROSS_PATH:
        speeds = (rng.uniform(4.0, 9.0), rng.uniform(10.0, 22.0))
    elif family == ScenarioFamily.LANE_CHANGE_SIDESWIPE:
        speeds = (rng.uniform(10.0, 25.0), rng.uniform(10.0, 25.0))
    else:
        speeds = (rng.uniform(8.0, 18.0), rng.uniform(8.0, 18.0))
    return ScenarioSpec(
        family=family,
        seed=int(rng.integers(2 ** 31)),
        lane_count=2,
        lane_width=float(rng.uniform(3.2, 3.8)),
        curve_radius=float(rng.uniform(30.0, 120.0)) if family == ScenarioFamily.HEAD_ON_CURVE else 60.0,
        speeds=(float(speeds[0]), float(speeds[1])),
        avoidance_decel=float(rng.uniform(1.5, 6.0)),
        avoidance_onset=float(rng.uniform(-3.0, -0.8)),
        third_vehicle=bool(rng.random() < third_vehicle_prob),
        speed_limit=float(SPEED_LIMITS[int(rng.integers(len(SPEED_LIMITS)))]),
    )


def synth_case(index: int, seed: int, settings: SynthSettings, max_attempts: int = 100) -> Tuple[AccidentCase, GroundTruth]:
    """Case ``index`` of a corpus; one rng stream per (seed, index), infeasible draws are redrawn"""
    rng = np.random.default_rng([seed, index])
    family = settings.families[index % len(settings.families)]
    case_id = f"synth-{index:04d}"
    for _ in range(max_attempts):
        spec = sample_spec(family, rng, settings.third_vehicle_prob)
        try:
            scene = generate(spec, case_id)
        except InfeasibleScenarioError as e:
            logger.debug(f"{case_id}: redrawing, {e}")
            continue
        return degrade(scene, settings.degradation, rng)
    raise InfeasibleScenarioError(f"{family.value} parameters", f"no feasible draw in {max_attempts} attempts")


def split_ids(ids: Sequence[str], test_fraction: float, seed: int) -> Dict[str, List[str]]:
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return {"train": train, "test": test}


def build_corpus(out: Union[str, Path], settings: SynthSettings, seed: int, n: Optional[int] = None,
                 workers: int = 0) -> Dict[str, object]:
    """
    Generate ``n`` cases with sealed truth sidecars and a manifest
    :return: the manifest
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = settings.n if n is None else n
    with ThreadPoolExecutor(max_workers=None if workers <= 0 else workers) as pool:
        results = list(pool.map(lambda i: synth_case(i, seed, settings), range(n)))
    for case, truth in results:
        case_crud.create(out, obj_in=case)
        truth_crud.create(out, obj_in=truth)
    ids = [case.case_id for case, _ in results]
    manifest = {
        "generator": "crash-recon synth",
        "seed": seed,
        "n": n,
        "families": [f.value for f in settings.families],
        "splits": split_ids(ids, settings.test_fraction, seed),
    }
    write_manifest(out, manifest)
    logger.info(f"wrote {n} synthetic cases to {out} "
                f"({len(manifest['splits']['train'])} train / {len(manifest['splits']['test'])} test)")
    return manifest
