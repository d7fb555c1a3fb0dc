"""
Input perturbations for robustness studies: accident-site noise, random
entry dropping, single-attribute ablation and partial maps.
"""

import logging
import math
from typing import Any, Tuple

import numpy as np

from crash_recon.schemas.case import (
    AccidentCase,
    Avoidance,
    FieldStatus,
    ImpactSide,
    PreMovement,
    VehicleCategory,
    VehicleSemantics,
)

logger = logging.getLogger(__name__)

# Vehicle attributes that drop_entries may blank, by status key
DROPPABLE = ("category", "pre_movement", "avoidance", "impact_area", "initial_lane", "travel_direction", "speed_limit")

UNKNOWN_VALUES = {
    "category": VehicleCategory.UNKNOWN,
    "pre_movement": PreMovement.UNKNOWN,
    "avoidance": Avoidance.UNKNOWN,
    "initial_lane": None,
    "travel_direction": None,
    "speed_limit": None,
}

# Case-file keys whose raw text is stored under a different name than the status key
RAW_KEYS = {"impact_area": "impact_side"}

# Attribute names accepted by ablate_field
ABLATABLE = {
    "speed_limit": "speed_limit",
    "initial_lane": "initial_lane",
    "avoidance": "avoidance",
    "pre_movement": "pre_movement",
    "impact_side": "impact_area",
    "direction": "travel_direction",
    "location": None,
    "summary": None,
}


def truncated_offset(rng: np.random.Generator, max_noise: float) -> np.ndarray:
    """2-D Gaussian offset with sigma = max_noise / 3, redrawn until its norm is within max_noise"""
    if max_noise <= 0:
        return np.zeros(2)
    sigma = max_noise / 3.0
    while True:
        offset = rng.normal(0.0, sigma, size=2)
        if np.linalg.norm(offset) <= max_noise:
            return offset


def inject_position_noise(case: AccidentCase, rng: np.random.Generator, max_noise: float) -> AccidentCase:
    """Perturb the annotated accident location"""
    location = case.annotations.accident_location
    if max_noise <= 0 or location is None:
        return case
    moved = np.asarray(location) + truncated_offset(rng, max_noise)
    annotations = case.annotations.model_copy(update={"accident_location": (float(moved[0]), float(moved[1]))})
    return case.model_copy(update={"annotations": annotations})


def blank_field(vehicle: VehicleSemantics, status_key: str, status: FieldStatus = FieldStatus.UNKNOWN,
                raw_value: Any = None) -> VehicleSemantics:
    """Clear one attribute, recording ``status``; malformed entries keep ``raw_value`` as their original text"""
    status_map = dict(vehicle.status)
    status_map[status_key] = status
    raw_key = RAW_KEYS.get(status_key, status_key)
    raw = {k: v for k, v in vehicle.raw_fields.items() if k != raw_key}
    if status == FieldStatus.MALFORMED:
        raw[raw_key] = raw_value
    update = {"status": status_map, "raw_fields": raw}
    if status_key in UNKNOWN_VALUES:
        update[status_key] = UNKNOWN_VALUES[status_key]
    return vehicle.model_copy(update=update)


def _with_blanked(case: AccidentCase, blanks) -> AccidentCase:
    """Apply (slot, status key) blanks; impact_area blanks the annotated side"""
    vehicles = list(case.vehicles)
    sides = list(case.annotations.impact_sides)
    for slot, key in blanks:
        vehicles[slot] = blank_field(vehicles[slot], key)
        if key == "impact_area":
            sides[slot] = ImpactSide.UNKNOWN
    annotations = case.annotations.model_copy(update={"impact_sides": sides})
    return case.model_copy(update={"vehicles": vehicles, "annotations": annotations})


def drop_entries(case: AccidentCase, rng: np.random.Generator, rate: float) -> AccidentCase:
    """Set every droppable attribute of every valid vehicle to unknown with probability ``rate``"""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"drop rate must lie in [0, 1], got {rate}")
    blanks = []
    for slot in case.valid_slots():
        for key in DROPPABLE:
            if rng.random() < rate:
                blanks.append((slot, key))
    return _with_blanked(case, blanks) if blanks else case


def ablate_field(case: AccidentCase, field: str) -> AccidentCase:
    """Blank one named report attribute for every vehicle (or the scene-level location / summary)"""
    if field not in ABLATABLE:
        raise ValueError(f"unknown ablation field '{field}', expected one of {sorted(ABLATABLE)}")
    if field == "location":
        return case.model_copy(update={"annotations": case.annotations.model_copy(update={"accident_location": None})})
    if field == "summary":
        return case.model_copy(update={"scene": case.scene.model_copy(update={"summary_text": ""})})
    return _with_blanked(case, [(slot, ABLATABLE[field]) for slot in case.valid_slots()])


def retain_map(case: AccidentCase, rng: np.random.Generator, fraction: float) -> Tuple[AccidentCase, int]:
    """
    Keep a random ceil(fraction * n) of the road polylines in their original order
    :return: reduced case and number of dropped polylines
    """
    geom = case.geometry
    polys = geom.all_polylines()
    if fraction >= 1.0 or not polys:
        return case, 0
    keep = set(rng.choice(len(polys), size=math.ceil(fraction * len(polys)), replace=False).tolist())
    n_curves = len(geom.curves)
    curves = [p for n, p in enumerate(geom.curves) if n in keep]
    lanes = [p for n, p in enumerate(geom.lane_centerlines) if n + n_curves in keep]
    kept_ids = {lane.id for lane in lanes}
    reduced = case.model_copy(update={"geometry": geom.model_copy(update={"curves": curves, "lane_centerlines": lanes})})
    lost = [(v.slot_index, "initial_lane") for v in case.vehicles
            if v.valid and v.initial_lane is not None and v.initial_lane not in kept_ids]
    if lost:
        reduced = _with_blanked(reduced, lost)
    dropped = len(polys) - len(keep)
    logger.debug(f"case {case.case_id}: {dropped} of {len(polys)} polylines removed")
    return reduced, dropped
