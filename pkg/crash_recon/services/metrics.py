"""
Evaluation metrics: AKD, AVD, AAPD, CR and CSA, plus acceleration and
curvature diagnostics. Case-level functions take plain arrays so they can be
checked against brute-force references.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from crash_recon.core.config import MetricsSettings
from crash_recon.core.errors import MissingKeypointsError, ReferenceDirectionError
from crash_recon.schemas.case import DT, K, MAX_SLOTS, AccidentCase, ImpactSide, time_grid
from crash_recon.schemas.metrics import CaseMetrics, MetricReport
from crash_recon.schemas.synth import GroundTruth
from crash_recon.services.geometry import contact_radius, nearest_on_lane, side_bucket
from crash_recon.services.reconstruct import Reconstruction

logger = logging.getLogger(__name__)

FT_TO_M = 0.3048
MOVE_EPS = 1e-9


def akd(rec: np.ndarray, gt: np.ndarray, keypoints: Sequence[Sequence[int]]) -> float:
    """
    Mean Euclidean distance over every (vehicle, keypoint step)
    :param rec: (N, K, 2) reconstructed positions
    :param gt: (N, K, 2) reference positions
    :param keypoints: grid steps per vehicle
    """
    dists = [np.linalg.norm(rec[n, steps] - gt[n, steps], axis=1) for n, steps in enumerate(keypoints) if len(steps)]
    if not dists:
        raise MissingKeypointsError("no keypoints to score")
    return float(np.concatenate(dists).mean())


def speed_at(speeds: np.ndarray, t: float) -> float:
    return float(np.interp(t, time_grid(), speeds))


def avd(rec_speeds: np.ndarray, edr: Sequence[Optional[Sequence[Tuple[float, float]]]]) -> Tuple[Optional[float], int]:
    """
    Mean |V_rec - V_edr| over vehicles and EDR timestamps
    :return: (value, sample count); value is None when the case has no EDR
    """
    errors = []
    for slot, samples in enumerate(edr):
        for t, v in samples or ():
            errors.append(abs(speed_at(rec_speeds[slot], t) - v))
    if not errors:
        return None, 0
    return float(np.mean(errors)), len(errors)


def reference_direction(positions: Optional[np.ndarray], lanes=(), at: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Unit terminal motion direction: the last nonzero displacement of ``positions``,
    else the tangent of the lane nearest to ``at``
    """
    if positions is not None and len(positions) >= 2:
        disp = np.diff(positions, axis=0)
        norms = np.linalg.norm(disp, axis=1)
        moving = np.flatnonzero(norms > MOVE_EPS)
        if len(moving):
            last = moving[-1]
            return disp[last] / norms[last]
    if lanes and at is not None:
        lane = min(lanes, key=lambda ln: (nearest_on_lane(at, ln)[0], ln.id))
        return nearest_on_lane(at, lane)[2]
    raise ReferenceDirectionError("reference vehicle is stationary and no lane tangent is available")


def aapd(c_rec: Sequence[float], c_gt: Sequence[float], direction: Sequence[float]) -> Tuple[float, float]:
    """Tangential and normal components of the accident-point error"""
    e_tan = np.asarray(direction, dtype=float)
    e_tan = e_tan / np.linalg.norm(e_tan)
    e_norm = np.array([-e_tan[1], e_tan[0]])
    err = np.asarray(c_rec, dtype=float) - np.asarray(c_gt, dtype=float)
    return abs(float(err @ e_tan)), abs(float(err @ e_norm))


def contact_threshold(reported: Optional[float], settings: MetricsSettings, conservative: Optional[bool] = None) -> float:
    """max(15 ft, reported distance), or the fixed 16.2 ft circle in conservative mode"""
    conservative = settings.conservative_circle if conservative is None else conservative
    if conservative:
        return settings.conservative_circle_ft * FT_TO_M
    base = settings.contact_threshold_ft * FT_TO_M
    return contact_radius(base, reported)


@dataclass
class CollisionCheck:
    detected: bool
    min_distance: float
    step: int
    contact_point: np.ndarray


def detect_collision(p_i: np.ndarray, p_j: np.ndarray, threshold: float) -> CollisionCheck:
    """Contact iff the minimum center distance is at most the threshold; c_rec is the midpoint there"""
    dist = np.linalg.norm(p_i - p_j, axis=1)
    k = int(np.argmin(dist))
    return CollisionCheck(bool(dist[k] <= threshold), float(dist[k]), k, 0.5 * (p_i[k] + p_j[k]))


def heading_at(p: np.ndarray, k: int) -> Optional[np.ndarray]:
    """Direction of the last nonzero displacement ending at or before step k"""
    for n in range(max(k, 1), 0, -1):
        d = p[n] - p[n - 1]
        if np.linalg.norm(d) > MOVE_EPS:
            return d
    return None


def contact_sides(p_i: np.ndarray, p_j: np.ndarray, k: int) -> Tuple[Optional[ImpactSide], Optional[ImpactSide]]:
    """Bucketed bearing of each vehicle's partner at step k, in its own heading frame"""
    out = []
    for own, other in ((p_i, p_j), (p_j, p_i)):
        heading = heading_at(own, k)
        out.append(None if heading is None else side_bucket(heading, other[k] - own[k]))
    return out[0], out[1]


def acceleration_error(rec_speeds: np.ndarray, gt_speeds: np.ndarray) -> float:
    return float(np.mean(np.abs(np.diff(rec_speeds) - np.diff(gt_speeds)) / DT))


def discrete_curvature(p: np.ndarray, eps: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """Turning angle over mean step length at interior steps; second value masks stationary steps"""
    disp = np.diff(p, axis=0)
    norms = np.linalg.norm(disp, axis=1)
    a, b = disp[:-1], disp[1:]
    angle = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], (a * b).sum(axis=1))
    length = 0.5 * (norms[:-1] + norms[1:])
    mask = (norms[:-1] > eps) & (norms[1:] > eps)
    return np.where(mask, angle / np.where(mask, length, 1.0), 0.0), mask


def curvature_error(rec: np.ndarray, gt: np.ndarray) -> Optional[float]:
    kr, mr = discrete_curvature(rec)
    kg, mg = discrete_curvature(gt)
    mask = mr & mg
    return float(np.mean(np.abs(kr - kg)[mask])) if mask.any() else None


def truth_arrays(truth: GroundTruth) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    positions = np.zeros((MAX_SLOTS, K, 2))
    speeds = np.zeros((MAX_SLOTS, K))
    valid = np.zeros(MAX_SLOTS, dtype=bool)
    for slot in range(MAX_SLOTS):
        if truth.positions[slot]:
            positions[slot] = truth.positions[slot]
            speeds[slot] = truth.speeds[slot]
            valid[slot] = True
    return positions, speeds, valid


def evaluate_case(rec: Reconstruction, case: AccidentCase, truth: Optional[GroundTruth],
                  settings: MetricsSettings, conservative: Optional[bool] = None) -> CaseMetrics:
    """
    Score one reconstruction
    :param case: the standardized input case (annotations, EDR, lanes)
    :param truth: sealed ground truth; without it AKD, AAPD reference and diagnostics fall back or stay empty
    """
    out = CaseMetrics(case_id=case.case_id)
    valid = rec.valid
    gt_pos = gt_speed = None
    if truth is not None:
        gt_pos, gt_speed, gt_valid = truth_arrays(truth)
        valid = valid & gt_valid
        keypoints = [truth.survey_steps[s] if valid[s] else [] for s in range(MAX_SLOTS)]
        try:
            out.akd = akd(rec.positions, gt_pos, keypoints)
        except MissingKeypointsError:
            logger.debug(f"case {case.case_id}: no survey keypoints")
        everything = [list(range(K)) if valid[s] else [] for s in range(MAX_SLOTS)]
        if valid.any():
            out.akd_all = akd(rec.positions, gt_pos, everything)
            out.per_vehicle_akd = [
                akd(rec.positions[s:s + 1], gt_pos[s:s + 1], [keypoints[s] or list(range(K))])
                for s in range(MAX_SLOTS) if valid[s]
            ]
            out.acc_error = float(np.mean([acceleration_error(rec.speeds[s], gt_speed[s])
                                           for s in range(MAX_SLOTS) if valid[s]]))
            curv = [curvature_error(rec.positions[s], gt_pos[s]) for s in range(MAX_SLOTS) if valid[s]]
            curv = [c for c in curv if c is not None]
            out.curvature_error = float(np.mean(curv)) if curv else None

    out.avd, out.avd_count = avd(rec.speeds, [case.edr[s] if rec.valid[s] else None for s in range(MAX_SLOTS)])

    pair = case.annotations.collision_pair or (truth.collision_pair if truth is not None else None)
    if pair is None:
        out.csa_status = "no_pair"
        return out
    i, j = pair
    threshold = contact_threshold(case.annotations.reported_collision_distance, settings, conservative)
    hit = detect_collision(rec.positions[i], rec.positions[j], threshold)
    out.collision = hit.detected
    out.min_distance = hit.min_distance
    out.threshold = threshold
    out.contact_point = (float(hit.contact_point[0]), float(hit.contact_point[1]))

    c_gt = truth.contact_point if truth is not None else case.annotations.accident_location
    if c_gt is not None:
        try:
            direction = reference_direction(None if gt_pos is None else gt_pos[i], case.geometry.lane_centerlines,
                                            np.asarray(c_gt, dtype=float))
            out.aapd_tan, out.aapd_norm = aapd(hit.contact_point, c_gt, direction)
        except ReferenceDirectionError as e:
            logger.info(f"case {case.case_id}: AAPD skipped, {e}")

    sides = case.annotations.impact_sides
    if sides[i] == ImpactSide.UNKNOWN or sides[j] == ImpactSide.UNKNOWN:
        out.csa_status = "unknown_side"
    elif not hit.detected:
        out.csa_status = "no_collision"
        out.csa_match = False
    else:
        side_i, side_j = contact_sides(rec.positions[i], rec.positions[j], hit.step)
        out.csa_match = side_i == sides[i] and side_j == sides[j]
    return out


def aggregate(cases: List[CaseMetrics], label: str = "model", config: Optional[Dict] = None) -> MetricReport:
    """
    Corpus report: distances are means over the cases that define them, CR over cases with an
    annotated pair, CSA over cases with both sides known (missed collisions count as non-matches)
    """
    def mean_of(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else 0.0

    with_pair = [c for c in cases if c.collision is not None]
    scored_csa = [c for c in cases if c.csa_match is not None]
    per_vehicle = [v for c in cases for v in c.per_vehicle_akd]
    report = MetricReport(
        label=label,
        n_cases=len(cases),
        akd=mean_of(c.akd for c in cases),
        akd_all=mean_of(c.akd_all for c in cases),
        avd=mean_of(c.avd for c in cases),
        aapd_tan=mean_of(c.aapd_tan for c in cases),
        aapd_norm=mean_of(c.aapd_norm for c in cases),
        cr=100.0 * sum(c.collision for c in with_pair) / len(with_pair) if with_pair else 0.0,
        csa=100.0 * sum(c.csa_match for c in scored_csa) / len(scored_csa) if scored_csa else 0.0,
        akd_variance=float(np.var(per_vehicle)) if per_vehicle else 0.0,
        acc_error=mean_of(c.acc_error for c in cases),
        curvature_error=mean_of(c.curvature_error for c in cases),
        per_vehicle_akd=per_vehicle,
        avd_excluded=sum(1 for c in cases if c.avd is None),
        csa_excluded=sum(1 for c in cases if c.csa_status in ("unknown_side", "no_pair")),
        csa_no_collision=sum(1 for c in cases if c.csa_status == "no_collision"),
        aapd_excluded=sum(1 for c in cases if c.aapd_tan is None),
        config=config or {},
    )
    logger.info(f"{label}: AKD {report.akd:.3f} m, AVD {report.avd:.3f} m/s, CR {report.cr:.2f}%, CSA {report.csa:.2f}%")
    return report
