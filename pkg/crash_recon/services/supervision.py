"""
Dense supervision from sparse evidence.

Surveyed trajectory points are truncated at the impact, smoothed into a
curvature-continuous reference curve and traced backward from the impact
endpoint with a speed profile (EDR when reliable, speed-limit prior otherwise).
Every vehicle ends with 51 (t, v, x, y, theta) tuples plus validity masks.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline

from crash_recon.core.config import SupervisionSettings
from crash_recon.core.errors import CurveFitError, EdrUnavailableError, UnsupervisedSpeedError
from crash_recon.schemas.case import DT, HORIZON, K, MAX_SLOTS, AccidentCase, VehicleSemantics, time_grid

logger = logging.getLogger(__name__)

DEDUPE_TOL = 1e-6


class SpeedSource(str, Enum):
    EDR = "edr"
    SPEED_LIMIT_PRIOR = "speed_limit_prior"
    UNIFORM = "uniform"


@dataclass
class SpeedProfile:
    """Speeds on the canonical grid; entries outside valid_mask are held values, never NaN"""
    samples: np.ndarray
    valid_mask: np.ndarray
    source: SpeedSource
    coverage: float = 1.0
    observations: int = 0
    strong: bool = False


def interpolate_edr(edr: Sequence[Tuple[float, float]], min_coverage: float = 0.6,
                    min_observations: int = 3) -> SpeedProfile:
    """
    Linear interpolation of EDR samples onto the 51-step grid
    :param edr: (t, v) samples within [-5, 0] s
    :param min_coverage: covered fraction of the 5 s window needed for a strong profile
    :param min_observations: samples needed for a strong profile
    """
    samples = np.asarray(edr, dtype=float).reshape(-1, 2)
    if len(samples) == 0:
        raise EdrUnavailableError("no EDR observations")
    order = np.argsort(samples[:, 0], kind="stable")
    samples = samples[order]
    _, first = np.unique(samples[:, 0], return_index=True)
    samples = samples[first]
    t = time_grid()
    if len(samples) == 1:
        nearest = int(np.argmin(np.abs(t - samples[0, 0])))
        mask = np.zeros(K, dtype=bool)
        mask[nearest] = True
        return SpeedProfile(np.full(K, samples[0, 1]), mask, SpeedSource.EDR, 0.0, 1, False)
    values = np.interp(t, samples[:, 0], samples[:, 1])
    mask = (t >= samples[0, 0] - 1e-9) & (t <= samples[-1, 0] + 1e-9)
    coverage = float((samples[-1, 0] - samples[0, 0]) / HORIZON)
    strong = coverage >= min_coverage and len(samples) >= min_observations
    return SpeedProfile(values, mask, SpeedSource.EDR, coverage, len(samples), strong)


def weak_speed_prior(vehicle: VehicleSemantics) -> SpeedProfile:
    """Constant profile at the posted limit, flagged weak"""
    if vehicle.speed_limit is None:
        raise UnsupervisedSpeedError(f"slot {vehicle.slot_index}: speed limit unknown")
    return SpeedProfile(np.full(K, float(vehicle.speed_limit)), np.ones(K, dtype=bool),
                        SpeedSource.SPEED_LIMIT_PRIOR)


@dataclass
class TruncationResult:
    points: List[Tuple[float, float, Optional[float]]]
    fallback: bool
    end_index: int


def truncate_at_impact(points: Sequence[Tuple[float, float, Optional[float]]],
                       accident_location: Optional[Sequence[float]], match_tol: float) -> TruncationResult:
    """
    Cut the travel-ordered points at the impact-matching point
    :return: retained points, whether the last observation was used as fallback endpoint, index of the endpoint
    """
    points = list(points)
    if not points:
        raise ValueError("truncate_at_impact needs at least one point")
    if len(points) == 1 or accident_location is None:
        return TruncationResult(points, True, len(points) - 1)
    xy = np.asarray([p[:2] for p in points], dtype=float)
    hits = np.flatnonzero(np.linalg.norm(xy - np.asarray(accident_location, dtype=float), axis=1) <= match_tol)
    if len(hits) == 0:
        return TruncationResult(points, True, len(points) - 1)
    end = int(hits[-1])
    return TruncationResult(points[: end + 1], False, end)


class ReferenceCurve:
    """Chord-length parameterized cubic spline with an arc-length lookup table"""

    def __init__(self, spline: CubicSpline, samples_per_segment: int = 64):
        self.spline = spline
        self.knots = spline.x
        self._d1 = spline.derivative(1)
        self._d2 = spline.derivative(2)
        u = np.concatenate([
            np.linspace(a, b, samples_per_segment, endpoint=False) for a, b in zip(self.knots[:-1], self.knots[1:])
        ] + [self.knots[-1:]])
        speed = np.linalg.norm(self._d1(u), axis=1)
        self._u = u
        self._s = cumulative_trapezoid(speed, u, initial=0.0)

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def _param(self, s: np.ndarray) -> np.ndarray:
        return np.interp(np.clip(s, 0.0, self.length), self._s, self._u)

    def tangent(self, end: str) -> np.ndarray:
        d = self._d1(self.knots[0] if end == "start" else self.knots[-1])
        return d / np.linalg.norm(d)

    def point_at(self, s) -> np.ndarray:
        """Positions at arc lengths s; outside [0, L] the end tangents are followed"""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = self.spline(self._param(s))
        before, after = s < 0.0, s > self.length
        if before.any():
            out[before] = self.spline(self.knots[0]) + s[before, None] * self.tangent("start")
        if after.any():
            out[after] = self.spline(self.knots[-1]) + (s[after, None] - self.length) * self.tangent("end")
        return out

    def heading_at(self, s) -> np.ndarray:
        d = self._d1(self._param(np.atleast_1d(np.asarray(s, dtype=float))))
        return np.arctan2(d[:, 1], d[:, 0])

    def curvature_at(self, s) -> np.ndarray:
        u = self._param(np.atleast_1d(np.asarray(s, dtype=float)))
        d1, d2 = self._d1(u), self._d2(u)
        num = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        return num / np.linalg.norm(d1, axis=1) ** 3

    def join_gaps(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, heading and curvature jumps between adjacent polynomial pieces at interior knots"""
        c = self.spline.c
        h = np.diff(self.knots)
        pos, head, curv = [], [], []
        for i in range(1, len(self.knots) - 1):
            left = [np.polyval(np.polyder(c[:, i - 1, d], m), h[i - 1]) for m in range(3) for d in range(2)]
            right = [np.polyval(np.polyder(c[:, i, d], m), 0.0) for m in range(3) for d in range(2)]
            (lx, ly, ldx, ldy, lddx, lddy), (rx, ry, rdx, rdy, rddx, rddy) = left, right
            pos.append(np.hypot(lx - rx, ly - ry))
            head.append(abs(np.angle(np.exp(1j * (np.arctan2(ldy, ldx) - np.arctan2(rdy, rdx))))))
            k_l = (ldx * lddy - ldy * lddx) / np.hypot(ldx, ldy) ** 3
            k_r = (rdx * rddy - rdy * rddx) / np.hypot(rdx, rdy) ** 3
            curv.append(abs(k_l - k_r))
        return np.asarray(pos), np.asarray(head), np.asarray(curv)


def fit_g2(points: Sequence[Sequence[Optional[float]]], samples_per_segment: int = 64) -> ReferenceCurve:
    """
    Interpolating curvature-continuous curve through ordered points
    :param points: (x, y) or (x, y, heading) rows; headings may be None
    :return: reference curve passing through every distinct input point
    """
    rows = [tuple(p) + (None,) * (3 - len(p)) for p in points]
    if len(rows) < 2:
        raise CurveFitError("at least 2 points are needed")
    xy = np.asarray([r[:2] for r in rows], dtype=float)
    keep = [0]
    for n in range(1, len(xy)):
        if np.linalg.norm(xy[n] - xy[keep[-1]]) > DEDUPE_TOL:
            keep.append(n)
    if len(keep) < len(xy):
        logger.warning(f"fit_g2: {len(xy) - len(keep)} duplicate consecutive points removed")
    if len(keep) < 2:
        raise CurveFitError("all points coincide")
    xy = xy[keep]
    headings = [rows[n][2] for n in keep]
    u = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    if headings[0] is not None and headings[-1] is not None and all(np.isfinite([headings[0], headings[-1]])):
        bc = ((1, np.array([np.cos(headings[0]), np.sin(headings[0])])),
              (1, np.array([np.cos(headings[-1]), np.sin(headings[-1])])))
    else:
        bc = "not-a-knot"
    return ReferenceCurve(CubicSpline(u, xy, axis=0, bc_type=bc), samples_per_segment)


def backward_distance(speeds: np.ndarray) -> np.ndarray:
    """l_k = integral of v from t_k to 0 by the trapezoid rule on the grid"""
    steps = 0.5 * (speeds[:-1] + speeds[1:]) * DT
    return np.concatenate([np.cumsum(steps[::-1])[::-1], [0.0]])


@dataclass
class VehicleTrace:
    xy: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    ell: np.ndarray
    weak: np.ndarray
    curvature: np.ndarray


def backward_trace(curve: ReferenceCurve, profile: SpeedProfile) -> VehicleTrace:
    """Place each grid step at arc length L - l_k; steps before the curve start are extrapolated and weak"""
    v = np.maximum(profile.samples, 0.0)
    ell = backward_distance(v)
    s = curve.length - ell
    xy = curve.point_at(s)
    xy[-1] = curve.spline(curve.knots[-1])
    return VehicleTrace(
        xy=xy,
        theta=curve.heading_at(s),
        v=v,
        ell=ell,
        weak=s < 0.0,
        curvature=np.where(s < 0.0, 0.0, curve.curvature_at(s)),
    )


def transition_time(curvature: np.ndarray, speeds: np.ndarray) -> float:
    """
    Grid time of the largest combined change of curvature and acceleration.
    Each term is normalized by its own maximum; NaN when both are flat.
    """
    t = time_grid()
    dk = np.zeros(K)
    dk[1:] = np.abs(np.diff(curvature))
    da = np.zeros(K)
    da[1:-1] = np.abs(speeds[2:] - 2.0 * speeds[1:-1] + speeds[:-2]) / DT ** 2
    score = np.zeros(K)
    for term in (dk, da):
        peak = term.max()
        if peak > 1e-9:
            score += term / peak
    if score.max() <= 0.0:
        return float("nan")
    return float(t[int(np.argmax(score))])


@dataclass
class DenseSupervision:
    """Per-case supervision arrays on the 51-step grid, one row per slot"""
    case_id: str
    t: np.ndarray = field(default_factory=time_grid)
    v: np.ndarray = field(default_factory=lambda: np.zeros((MAX_SLOTS, K)))
    xy: np.ndarray = field(default_factory=lambda: np.zeros((MAX_SLOTS, K, 2)))
    theta: np.ndarray = field(default_factory=lambda: np.zeros((MAX_SLOTS, K)))
    vehicle_valid: np.ndarray = field(default_factory=lambda: np.zeros(MAX_SLOTS, dtype=bool))
    step_valid: np.ndarray = field(default_factory=lambda: np.zeros((MAX_SLOTS, K), dtype=bool))
    step_weak: np.ndarray = field(default_factory=lambda: np.zeros((MAX_SLOTS, K), dtype=bool))
    speed_mask: np.ndarray = field(default_factory=lambda: np.zeros((MAX_SLOTS, K), dtype=bool))
    speed_strong: np.ndarray = field(default_factory=lambda: np.zeros(MAX_SLOTS, dtype=bool))
    speed_valid: np.ndarray = field(default_factory=lambda: np.zeros(MAX_SLOTS, dtype=bool))
    speed_prior: np.ndarray = field(default_factory=lambda: np.full(MAX_SLOTS, np.inf))
    tau_star: np.ndarray = field(default_factory=lambda: np.full(MAX_SLOTS, np.nan))
    coverage: np.ndarray = field(default_factory=lambda: np.zeros(MAX_SLOTS))
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(MAX_SLOTS, dtype=bool))
    path_length: np.ndarray = field(default_factory=lambda: np.zeros(MAX_SLOTS))

    def position_mask(self) -> np.ndarray:
        """Valid (vehicle, step) pairs for position supervision"""
        return self.step_valid & self.vehicle_valid[:, None]

    def speed_loss_mask(self, policy: str = "edr_only") -> np.ndarray:
        """Valid (vehicle, step) pairs for speed supervision"""
        selected = self.speed_strong if policy == "edr_only" else self.speed_valid
        return self.position_mask() & self.speed_mask & selected[:, None]


def _select_speed(case: AccidentCase, slot: int, settings: SupervisionSettings,
                  path_length: float) -> Tuple[SpeedProfile, float, bool]:
    """Speed profile, speed prior for the timing cap, and whether the profile supervises speed"""
    vehicle = case.vehicles[slot]
    edr_profile = None
    if case.edr[slot]:
        edr_profile = interpolate_edr(case.edr[slot], settings.edr_min_coverage, settings.edr_min_observations)
        if edr_profile.strong:
            return edr_profile, float(np.max(np.asarray(case.edr[slot])[:, 1])), True
    try:
        profile = weak_speed_prior(vehicle)
        return profile, float(vehicle.speed_limit), True
    except UnsupervisedSpeedError:
        pass
    if edr_profile is not None:
        logger.info(f"case {case.case_id} slot {slot}: unreliable EDR used, no speed limit known")
        return edr_profile, float("inf"), True
    logger.warning(f"case {case.case_id} slot {slot}: speed unsupervised, uniform traverse assumed")
    uniform = np.full(K, path_length / HORIZON)
    return SpeedProfile(uniform, np.zeros(K, dtype=bool), SpeedSource.UNIFORM), float("inf"), False


def build_supervision(case: AccidentCase, settings: Optional[SupervisionSettings] = None) -> DenseSupervision:
    """
    Dense supervision for every valid vehicle of a north-up case
    :param case: standardized case
    :param settings: matching tolerance, EDR reliability thresholds, arc table density
    """
    settings = settings or SupervisionSettings()
    sup = DenseSupervision(case_id=case.case_id)
    anchor = case.annotations.accident_location
    for slot in case.valid_slots():
        points = case.raw_points[slot]
        if not points:
            continue
        cut = truncate_at_impact(points, anchor, settings.match_tol)
        if cut.fallback and anchor is not None:
            logger.warning(f"case {case.case_id} slot {slot}: no point within {settings.match_tol} m of the "
                           f"accident location, last observation used as endpoint")
        sup.fallback[slot] = cut.fallback
        kept = cut.points if len(cut.points) >= 2 else points
        try:
            curve = fit_g2(kept, settings.samples_per_segment)
        except CurveFitError:
            end = np.asarray(kept[-1][:2], dtype=float)
            logger.info(f"case {case.case_id} slot {slot}: survey points coincide, vehicle treated as stationary")
            sup.xy[slot] = end
            sup.theta[slot] = kept[-1][2] if kept[-1][2] is not None else 0.0
            sup.vehicle_valid[slot] = True
            sup.step_valid[slot] = True
            sup.speed_mask[slot] = True
            sup.speed_valid[slot] = True
            sup.speed_prior[slot] = 0.0 if case.vehicles[slot].speed_limit is None else case.vehicles[slot].speed_limit
            continue
        profile, prior, supervised = _select_speed(case, slot, settings, curve.length)
        trace = backward_trace(curve, profile)
        sup.xy[slot] = trace.xy
        sup.theta[slot] = trace.theta
        sup.v[slot] = trace.v
        sup.vehicle_valid[slot] = True
        sup.step_valid[slot] = True
        sup.step_weak[slot] = trace.weak
        sup.speed_mask[slot] = profile.valid_mask
        sup.speed_strong[slot] = profile.strong
        sup.speed_valid[slot] = supervised
        sup.speed_prior[slot] = prior
        sup.coverage[slot] = profile.coverage
        sup.path_length[slot] = curve.length
        sup.tau_star[slot] = transition_time(trace.curvature, trace.v)
        if trace.weak.any():
            logger.debug(f"case {case.case_id} slot {slot}: {int(trace.weak.sum())} steps extrapolated before the curve start")
    return sup


SUPERVISION_COLUMNS = [
    "vehicle", "t", "v", "x", "y", "theta", "step_valid", "speed_strong",
    "step_weak", "speed_mask", "speed_valid", "speed_prior", "tau_star", "coverage", "fallback", "path_length",
]


def supervision_frame(sup: DenseSupervision) -> pd.DataFrame:
    """Long-format table, one row per (valid vehicle, step)"""
    frames = []
    for slot in np.flatnonzero(sup.vehicle_valid):
        frames.append(pd.DataFrame({
            "vehicle": slot,
            "t": np.round(sup.t, 10),
            "v": sup.v[slot],
            "x": sup.xy[slot, :, 0],
            "y": sup.xy[slot, :, 1],
            "theta": sup.theta[slot],
            "step_valid": sup.step_valid[slot].astype(int),
            "speed_strong": int(sup.speed_strong[slot]),
            "step_weak": sup.step_weak[slot].astype(int),
            "speed_mask": sup.speed_mask[slot].astype(int),
            "speed_valid": int(sup.speed_valid[slot]),
            "speed_prior": sup.speed_prior[slot],
            "tau_star": sup.tau_star[slot],
            "coverage": sup.coverage[slot],
            "fallback": int(sup.fallback[slot]),
            "path_length": sup.path_length[slot],
        }))
    if not frames:
        return pd.DataFrame(columns=SUPERVISION_COLUMNS)
    return pd.concat(frames, ignore_index=True)[SUPERVISION_COLUMNS]


def supervision_from_frame(case_id: str, frame: pd.DataFrame) -> DenseSupervision:
    sup = DenseSupervision(case_id=case_id)
    for slot, rows in frame.groupby("vehicle", sort=True):
        slot = int(slot)
        rows = rows.sort_values("t")
        if len(rows) != K:
            raise ValueError(f"supervision for case {case_id} slot {slot} has {len(rows)} rows, expected {K}")
        sup.vehicle_valid[slot] = True
        sup.v[slot] = rows["v"].to_numpy(float)
        sup.xy[slot] = rows[["x", "y"]].to_numpy(float)
        sup.theta[slot] = rows["theta"].to_numpy(float)
        sup.step_valid[slot] = rows["step_valid"].to_numpy(int) == 1
        sup.step_weak[slot] = rows["step_weak"].to_numpy(int) == 1
        sup.speed_mask[slot] = rows["speed_mask"].to_numpy(int) == 1
        first = rows.iloc[0]
        sup.speed_strong[slot] = int(first["speed_strong"]) == 1
        sup.speed_valid[slot] = int(first["speed_valid"]) == 1
        sup.speed_prior[slot] = float(first["speed_prior"])
        sup.tau_star[slot] = float(first["tau_star"])
        sup.coverage[slot] = float(first["coverage"])
        sup.fallback[slot] = int(first["fallback"]) == 1
        sup.path_length[slot] = float(first["path_length"])
    return sup
