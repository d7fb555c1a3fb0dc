"""
Case ingestion: report-style JSON to AccidentCase, and back.

Every semantic field ends up in one of four states: present, missing (key
absent or null), unknown (explicit "unknown"), malformed (value that does not
fit the expected format). Malformed raw values are kept so that
serialize_case(ingest_case(x)) re-ingests to the same case.
"""

import json
import logging
import math
import re
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Type, Union

import numpy as np

from crash_recon.core.errors import CaseParseError, CaseSchemaError
from crash_recon.schemas.case import (
    HORIZON,
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
    VehicleCategory,
    VehicleSemantics,
    Weather,
)
from crash_recon.schemas.geometry import (
    MIN_POINT_SPACING,
    GeometryFrame,
    Polyline,
    PolylineCategory,
    RigidTransform,
    RoadGeometry,
    ring_is_simple,
)

logger = logging.getLogger(__name__)

FT_TO_M = 0.3048
LENGTH_UNITS = {"m": 1.0, "meter": 1.0, "meters": 1.0, "ft": FT_TO_M, "feet": FT_TO_M}
SPEED_UNITS = {"m/s": 1.0, "mps": 1.0, "mph": 0.44704, "km/h": 1.0 / 3.6, "kph": 1.0 / 3.6, "kmh": 1.0 / 3.6}

_H = math.sqrt(0.5)
COMPASS = {
    "n": (0.0, 1.0), "north": (0.0, 1.0),
    "s": (0.0, -1.0), "south": (0.0, -1.0),
    "e": (1.0, 0.0), "east": (1.0, 0.0),
    "w": (-1.0, 0.0), "west": (-1.0, 0.0),
    "ne": (_H, _H), "northeast": (_H, _H),
    "nw": (-_H, _H), "northwest": (-_H, _H),
    "se": (_H, -_H), "southeast": (_H, -_H),
    "sw": (-_H, -_H), "southwest": (-_H, -_H),
}

_TIME_RE = re.compile(r"^([01]?\d|2[0-3]):([0-5]\d)$")
_SPEED_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*(m/s|mps|mph|km/h|kph|kmh)?\s*$", re.IGNORECASE)


def _is_unknown(value: Any) -> bool:
    return isinstance(value, str) and value.strip().lower() == "unknown"


def _parse_enum(value: Any, enum_cls: Type[Enum]) -> Tuple[Enum, FieldStatus]:
    if value is None:
        return enum_cls("unknown"), FieldStatus.MISSING
    if _is_unknown(value):
        return enum_cls("unknown"), FieldStatus.UNKNOWN
    if isinstance(value, str):
        key = value.strip().replace("_", "-")
        for member in enum_cls:
            if member.value.lower() == key.lower():
                return member, FieldStatus.PRESENT
    return enum_cls("unknown"), FieldStatus.MALFORMED


def _finite_number(value: Any) -> Optional[float]:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    try:
        value = float(value)
    except OverflowError:
        return None
    return value if math.isfinite(value) else None


def _parse_vector(value: Any, scale: float = 1.0) -> Optional[Tuple[float, float]]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        return None
    x, y = _finite_number(value[0]), _finite_number(value[1])
    if x is None or y is None:
        return None
    return x * scale, y * scale


def parse_direction(value: Any) -> Optional[Tuple[float, float]]:
    """Unit travel direction from a 2-vector or a compass word ("north", "SB", "eastbound")"""
    if isinstance(value, str):
        key = re.sub(r"[\s_\-]", "", value.strip().lower())
        if key.endswith("bound"):
            key = key[: -len("bound")]
        elif len(key) in (2, 3) and key.endswith("b"):
            key = key[:-1]
        return COMPASS.get(key)
    vec = _parse_vector(value)
    if vec is None:
        return None
    norm = math.hypot(*vec)
    if norm == 0.0:
        return None
    if abs(norm - 1.0) < 1e-12:
        return vec
    return vec[0] / norm, vec[1] / norm


def parse_speed(value: Any, unit_scale: float) -> Optional[float]:
    number = _finite_number(value)
    if number is not None:
        return number * unit_scale if number >= 0 else None
    if isinstance(value, str):
        match = _SPEED_RE.match(value)
        if match:
            unit = (match.group(2) or "").lower()
            scale = SPEED_UNITS[unit] if unit else unit_scale
            number = float(match.group(1))
            return number * scale if math.isfinite(number) else None
    return None


def _parse_json(raw: Union[str, bytes, bytearray]) -> Any:
    if isinstance(raw, (bytes, bytearray)):
        try:
            text = bytes(raw).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CaseParseError(f"invalid UTF-8: {e.reason}", e.start) from None
    else:
        text = raw
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise CaseParseError(f"malformed JSON: {e.msg}", offset) from None
    except (ValueError, RecursionError) as e:
        # integer literals past the int conversion limit, or nesting past the recursion limit
        raise CaseParseError(f"unreadable JSON: {e}", 0) from None


def _parse_polyline(item: Any, default_id: str, default_category: PolylineCategory,
                    scale: float) -> Optional[Polyline]:
    if not isinstance(item, dict):
        logger.warning(f"{default_id}: polyline entry is not an object, dropped")
        return None
    points = []
    dropped = 0
    for p in item.get("points") or []:
        vec = _parse_vector(p, scale)
        if vec is None:
            dropped += 1
            continue
        if points and math.hypot(vec[0] - points[-1][0], vec[1] - points[-1][1]) <= MIN_POINT_SPACING:
            dropped += 1
            continue
        points.append(vec)
    poly_id = str(item.get("id", default_id))
    if dropped:
        logger.warning(f"polyline {poly_id}: {dropped} coincident or non-numeric points removed")
    if len(points) < 2:
        logger.warning(f"polyline {poly_id}: fewer than 2 distinct points, dropped")
        return None
    raw_category = item.get("category", default_category.value)
    try:
        category = PolylineCategory(str(raw_category).strip().lower())
    except ValueError:
        logger.warning(f"polyline {poly_id}: category {raw_category!r} not recognized, using 'other'")
        category = PolylineCategory.OTHER
    return Polyline(id=poly_id, category=category, points=points)


def _parse_ring(item: Any, scale: float) -> Optional[List[Tuple[float, float]]]:
    if not isinstance(item, list):
        return None
    ring = []
    for p in item:
        vec = _parse_vector(p, scale)
        if vec is not None and (not ring or vec != ring[-1]):
            ring.append(vec)
    if len(ring) >= 2 and ring[0] == ring[-1]:
        ring = ring[:-1]
    if len(set(ring)) < 3:
        return None
    ring.append(ring[0])
    return ring if ring_is_simple(ring) else None


def _parse_geometry(doc: Any, scale: float) -> RoadGeometry:
    if not isinstance(doc, dict):
        if doc is not None:
            logger.warning("geometry is not an object, treated as empty")
        return RoadGeometry()
    curves = [
        p for n, item in enumerate(doc.get("curves") or [])
        if (p := _parse_polyline(item, f"curve-{n}", PolylineCategory.OTHER, scale)) is not None
    ]
    lanes = [
        p for n, item in enumerate(doc.get("lane_centerlines") or [])
        if (p := _parse_polyline(item, f"lane-{n}", PolylineCategory.CENTERLINE, scale)) is not None
    ]
    lanes = [p.model_copy(update={"category": PolylineCategory.CENTERLINE}) for p in lanes]
    rings = []
    for n, item in enumerate(doc.get("lane_polygons") or []):
        ring = _parse_ring(item, scale)
        if ring is None:
            logger.warning(f"lane polygon {n}: not a simple ring, dropped")
        else:
            rings.append(ring)
    try:
        frame = GeometryFrame(str(doc.get("frame", "raw")))
    except ValueError:
        raise CaseSchemaError("geometry.frame", f"unsupported frame {doc.get('frame')!r}") from None
    transform = None
    if isinstance(doc.get("transform"), dict):
        t = doc["transform"]
        translation = _parse_vector(t.get("translation", [0.0, 0.0]), scale) or (0.0, 0.0)
        angle = _finite_number(t.get("angle"))
        if angle is not None:
            transform = RigidTransform.from_angle(angle, translation)
        else:
            rot = t.get("rotation")
            rows = [_parse_vector(r) for r in rot] if isinstance(rot, list) and len(rot) == 2 else None
            if rows is None or None in rows:
                raise CaseSchemaError("geometry.transform.rotation", "expected a 2x2 numeric matrix")
            transform = RigidTransform(rotation=(rows[0], rows[1]), translation=translation)
    north_source = doc.get("north_source")
    north_angle = _finite_number(doc.get("north_angle"))
    return RoadGeometry(
        curves=curves,
        lane_centerlines=lanes,
        lane_polygons=rings,
        frame=frame,
        transform=transform,
        north_arrow=_finite_number(doc.get("north_arrow")),
        north_metadata=_finite_number(doc.get("north_metadata")),
        north_angle=north_angle if frame == GeometryFrame.NORTH_UP else None,
        north_source=north_source if frame == GeometryFrame.NORTH_UP and north_source in ("north_arrow", "default_metadata") else None,
    )


def _parse_trajectory(value: Any, scale: float, status: Dict[str, FieldStatus], raw_fields: Dict[str, Any]):
    if value is None or value == []:
        status["trajectory"] = FieldStatus.MISSING
        return []
    if _is_unknown(value):
        status["trajectory"] = FieldStatus.UNKNOWN
        return []
    points = []
    if isinstance(value, list):
        for p in value:
            if not isinstance(p, (list, tuple)) or len(p) not in (2, 3):
                continue
            xy = _parse_vector(p[:2], scale)
            theta = _finite_number(p[2]) if len(p) == 3 else None
            if xy is None or (len(p) == 3 and p[2] is not None and theta is None):
                continue
            points.append((xy[0], xy[1], theta))
    if not points:
        status["trajectory"] = FieldStatus.MALFORMED
        raw_fields["trajectory"] = value
        return []
    status["trajectory"] = FieldStatus.PRESENT
    return points


def normalize_edr(samples: List[Tuple[float, float]], case_id: str = "", slot: int = -1) -> List[Tuple[float, float]]:
    """Sort by time, keep the first sample per timestamp, drop samples outside [-5, 0] s"""
    kept = {}
    for t, v in sorted(samples, key=lambda s: s[0]):
        if t < -HORIZON - 1e-9 or t > 1e-9:
            logger.warning(f"case {case_id} slot {slot}: EDR sample at t={t:.3f} s outside [-5, 0] dropped")
            continue
        kept.setdefault(t, v)
    return [(float(t), float(v)) for t, v in kept.items()]


def _parse_edr(value: Any, speed_scale: float, case_id: str, slot: int,
               status: Dict[str, FieldStatus], raw_fields: Dict[str, Any]):
    if value is None or value == []:
        status["edr"] = FieldStatus.MISSING
        return None
    if _is_unknown(value):
        status["edr"] = FieldStatus.UNKNOWN
        return None
    samples = []
    if isinstance(value, list):
        for s in value:
            if isinstance(s, (list, tuple)) and len(s) == 2:
                t, v = _finite_number(s[0]), _finite_number(s[1])
                if t is not None and v is not None and v >= 0:
                    samples.append((t, v * speed_scale))
    samples = normalize_edr(samples, case_id, slot)
    if not samples:
        status["edr"] = FieldStatus.MALFORMED
        raw_fields["edr"] = value
        return None
    status["edr"] = FieldStatus.PRESENT
    return samples


def _parse_vehicle(item: Dict[str, Any], slot: int, lane_ids: set, units: Tuple[float, float], case_id: str):
    length_scale, speed_scale = units
    status: Dict[str, FieldStatus] = {}
    raw_fields: Dict[str, Any] = {}

    def enum_field(key: str, enum_cls, status_key: Optional[str] = None):
        value, st = _parse_enum(item.get(key), enum_cls)
        if status_key:
            status[status_key] = st
        if st == FieldStatus.MALFORMED:
            raw_fields[key] = item.get(key)
        return value

    category = enum_field("category", VehicleCategory, "category")
    pre_movement = enum_field("pre_movement", PreMovement, "pre_movement")
    avoidance = enum_field("avoidance", Avoidance, "avoidance")
    impact_side = enum_field("impact_side", ImpactSide, "impact_area")

    lane_value = item.get("initial_lane")
    initial_lane = None
    if lane_value is None:
        status["initial_lane"] = FieldStatus.MISSING
    elif _is_unknown(lane_value):
        status["initial_lane"] = FieldStatus.UNKNOWN
    elif isinstance(lane_value, str) and lane_value in lane_ids:
        initial_lane = lane_value
        status["initial_lane"] = FieldStatus.PRESENT
    else:
        logger.warning(f"case {case_id} slot {slot}: initial lane {lane_value!r} does not resolve, treated as unknown")
        status["initial_lane"] = FieldStatus.MALFORMED
        raw_fields["initial_lane"] = lane_value

    dir_value = item.get("travel_direction")
    direction = None
    if dir_value is None:
        status["travel_direction"] = FieldStatus.MISSING
    elif _is_unknown(dir_value):
        status["travel_direction"] = FieldStatus.UNKNOWN
    else:
        direction = parse_direction(dir_value)
        if direction is None:
            status["travel_direction"] = FieldStatus.MALFORMED
            raw_fields["travel_direction"] = dir_value
        else:
            status["travel_direction"] = FieldStatus.PRESENT

    limit_value = item.get("speed_limit")
    speed_limit = None
    if limit_value is None:
        status["speed_limit"] = FieldStatus.MISSING
    elif _is_unknown(limit_value):
        status["speed_limit"] = FieldStatus.UNKNOWN
    else:
        speed_limit = parse_speed(limit_value, speed_scale)
        if speed_limit is None:
            status["speed_limit"] = FieldStatus.MALFORMED
            raw_fields["speed_limit"] = limit_value
        else:
            status["speed_limit"] = FieldStatus.PRESENT

    trajectory = _parse_trajectory(item.get("trajectory"), length_scale, status, raw_fields)
    edr = _parse_edr(item.get("edr"), speed_scale, case_id, slot, status, raw_fields)
    description = item.get("description")
    vehicle = VehicleSemantics(
        slot_index=slot,
        valid=True,
        category=category,
        initial_lane=initial_lane,
        travel_direction=direction,
        pre_movement=pre_movement,
        avoidance=avoidance,
        speed_limit=speed_limit,
        description=description if isinstance(description, str) else "",
        status=status,
        raw_fields=raw_fields,
    )
    return vehicle, impact_side, trajectory, edr


def ingest_case(raw: Union[str, bytes, bytearray, Dict[str, Any]]) -> AccidentCase:
    """
    Parse one case document
    :param raw: JSON text/bytes or an already decoded object
    :return: case with every enum populated and slots padded to 5
    """
    doc = raw if isinstance(raw, dict) else _parse_json(raw)
    if not isinstance(doc, dict):
        raise CaseSchemaError("$", "a case document must be a JSON object")
    case_id = str(doc.get("case_id", "unnamed"))

    units = doc.get("units") if isinstance(doc.get("units"), dict) else {}
    length_unit = str(units.get("length", "m")).lower()
    speed_unit = str(units.get("speed", "m/s")).lower()
    if length_unit not in LENGTH_UNITS:
        raise CaseSchemaError("units.length", f"unsupported length unit {length_unit!r}")
    if speed_unit not in SPEED_UNITS:
        raise CaseSchemaError("units.speed", f"unsupported speed unit {speed_unit!r}")
    length_scale, speed_scale = LENGTH_UNITS[length_unit], SPEED_UNITS[speed_unit]

    scene_doc = doc.get("scene") if isinstance(doc.get("scene"), dict) else {}
    crash_time = scene_doc.get("crash_time")
    if crash_time is not None and not (isinstance(crash_time, str) and _TIME_RE.match(crash_time)):
        if not _is_unknown(crash_time):
            logger.warning(f"case {case_id}: crash_time {crash_time!r} is not HH:MM, dropped")
        crash_time = None
    summary = scene_doc.get("summary", scene_doc.get("summary_text", ""))
    scene = SceneSemantics(
        summary_text=summary if isinstance(summary, str) else "",
        crash_time=crash_time,
        lighting=_parse_enum(scene_doc.get("lighting"), Lighting)[0],
        weather=_parse_enum(scene_doc.get("weather"), Weather)[0],
        road_condition=_parse_enum(scene_doc.get("road_condition"), RoadCondition)[0],
        locality=_parse_enum(scene_doc.get("locality"), Locality)[0],
    )

    geometry = _parse_geometry(doc.get("geometry"), length_scale)
    lane_ids = {lane.id for lane in geometry.lane_centerlines}

    vehicles = [VehicleSemantics.empty(n) for n in range(MAX_SLOTS)]
    sides = [ImpactSide.UNKNOWN] * MAX_SLOTS
    raw_points: List[list] = [[] for _ in range(MAX_SLOTS)]
    edr: List[Optional[list]] = [None] * MAX_SLOTS
    entries = doc.get("vehicles") if isinstance(doc.get("vehicles"), list) else []
    taken = set()
    for position, item in enumerate(entries):
        if not isinstance(item, dict):
            logger.warning(f"case {case_id}: vehicle entry {position} is not an object, dropped")
            continue
        slot = item.get("slot", position)
        if isinstance(slot, bool) or not isinstance(slot, int) or not 0 <= slot < MAX_SLOTS or slot in taken:
            logger.warning(f"case {case_id}: vehicle slot {slot!r} is out of range or duplicated, dropped")
            continue
        taken.add(slot)
        vehicles[slot], sides[slot], raw_points[slot], edr[slot] = _parse_vehicle(
            item, slot, lane_ids, (length_scale, speed_scale), case_id
        )

    ann_doc = doc.get("annotations") if isinstance(doc.get("annotations"), dict) else {}
    location = _parse_vector(ann_doc.get("accident_location"), length_scale)
    if location is None and ann_doc.get("accident_location") is not None:
        logger.warning(f"case {case_id}: accident_location is malformed, treated as unknown")
    pair = None
    pair_value = ann_doc.get("collision_pair")
    if pair_value is not None:
        if (not isinstance(pair_value, list) or len(pair_value) != 2
                or not all(isinstance(s, int) and not isinstance(s, bool) for s in pair_value)):
            raise CaseSchemaError("annotations.collision_pair", "expected two slot indices")
        i, j = pair_value
        if i == j or not (0 <= i < MAX_SLOTS and 0 <= j < MAX_SLOTS) or not vehicles[i].valid or not vehicles[j].valid:
            raise CaseSchemaError("annotations.collision_pair", f"{pair_value} does not reference two distinct valid slots")
        pair = (i, j)
    distance = _finite_number(ann_doc.get("reported_collision_distance"))
    annotations = ImpactAnnotations(
        accident_location=location,
        collision_pair=pair,
        impact_sides=sides,
        reported_collision_distance=distance * length_scale if distance is not None and distance >= 0 else None,
    )
    return AccidentCase(
        case_id=case_id,
        scene=scene,
        vehicles=vehicles,
        geometry=geometry,
        annotations=annotations,
        raw_points=raw_points,
        edr=edr,
    )


def _field_out(vehicle: VehicleSemantics, status_key: str, raw_key: str, value: Any, out: Dict[str, Any]) -> None:
    st = vehicle.field_status(status_key)
    if st == FieldStatus.PRESENT:
        out[raw_key] = value
    elif st == FieldStatus.UNKNOWN:
        out[raw_key] = "unknown"
    elif st == FieldStatus.MALFORMED:
        out[raw_key] = vehicle.raw_fields.get(raw_key)


def serialize_case(case: AccidentCase) -> Dict[str, Any]:
    """Canonical JSON-ready document (meters, m/s) that ingests back to the same case"""
    geom = case.geometry

    def poly(p: Polyline) -> Dict[str, Any]:
        return {"id": p.id, "category": p.category.value, "points": [list(q) for q in p.points]}

    geometry: Dict[str, Any] = {
        "frame": geom.frame.value,
        "curves": [poly(p) for p in geom.curves],
        "lane_centerlines": [poly(p) for p in geom.lane_centerlines],
        "lane_polygons": [[list(q) for q in ring] for ring in geom.lane_polygons],
    }
    if geom.transform is not None:
        geometry["transform"] = {
            "rotation": [list(r) for r in geom.transform.rotation],
            "translation": list(geom.transform.translation),
        }
    for key in ("north_arrow", "north_metadata", "north_angle"):
        if getattr(geom, key) is not None:
            geometry[key] = getattr(geom, key)
    if geom.north_source is not None:
        geometry["north_source"] = geom.north_source.value

    vehicles = []
    for v in case.vehicles:
        if not v.valid:
            continue
        slot = v.slot_index
        out: Dict[str, Any] = {"slot": slot}
        for key, status_key in (("category", "category"), ("pre_movement", "pre_movement"),
                                ("avoidance", "avoidance")):
            _field_out(v, status_key, key, getattr(v, key).value, out)
        _field_out(v, "impact_area", "impact_side", case.annotations.impact_sides[slot].value, out)
        _field_out(v, "initial_lane", "initial_lane", v.initial_lane, out)
        _field_out(v, "travel_direction", "travel_direction",
                   list(v.travel_direction) if v.travel_direction else None, out)
        _field_out(v, "speed_limit", "speed_limit", v.speed_limit, out)
        _field_out(v, "trajectory", "trajectory",
                   [[x, y] if th is None else [x, y, th] for x, y, th in case.raw_points[slot]], out)
        _field_out(v, "edr", "edr", [list(s) for s in case.edr[slot] or []], out)
        if v.description:
            out["description"] = v.description
        vehicles.append(out)

    scene = case.scene
    scene_doc: Dict[str, Any] = {
        "summary": scene.summary_text,
        "lighting": scene.lighting.value,
        "weather": scene.weather.value,
        "road_condition": scene.road_condition.value,
        "locality": scene.locality.value,
    }
    if scene.crash_time is not None:
        scene_doc["crash_time"] = scene.crash_time
    ann = case.annotations
    ann_doc: Dict[str, Any] = {}
    if ann.accident_location is not None:
        ann_doc["accident_location"] = list(ann.accident_location)
    if ann.collision_pair is not None:
        ann_doc["collision_pair"] = list(ann.collision_pair)
    if ann.reported_collision_distance is not None:
        ann_doc["reported_collision_distance"] = ann.reported_collision_distance
    return {
        "case_id": case.case_id,
        "units": {"length": "m", "speed": "m/s"},
        "scene": scene_doc,
        "vehicles": vehicles,
        "geometry": geometry,
        "annotations": ann_doc,
    }


def dumps_case(case: AccidentCase) -> str:
    return json.dumps(serialize_case(case), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def edr_array(samples: Optional[List[Tuple[float, float]]]) -> np.ndarray:
    return np.asarray(samples or [], dtype=float).reshape(-1, 2)
