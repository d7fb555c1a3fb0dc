"""
Training objectives. Every term is a masked mean over its own validity set;
an empty set contributes exactly zero and records a zero count.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from crash_recon.core.config import LOSS_NAMES, ObjectiveSettings
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tensor
from crash_recon.schemas.case import DT, K, MAX_SLOTS, Avoidance, time_grid
from crash_recon.services.geometry import contact_radius
from crash_recon.services.supervision import DenseSupervision

logger = logging.getLogger(__name__)

# Labels whose post-transition behavior is a sign constraint on mean acceleration
ACCELERATING = {Avoidance.ACCELERATING}
BRAKING = {Avoidance.BRAKING, Avoidance.BRAKING_AND_STEERING}


@dataclass
class LossBreakdown:
    terms: Dict[str, Tensor]
    counts: Dict[str, int]
    weights: Dict[str, float]
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {name: float(t.data) for name, t in self.terms.items()}


@dataclass
class LossInputs:
    """Everything the objectives read from one forward pass"""
    p_hat: Tensor
    v_hat: Tensor
    tau: Tensor
    valid: np.ndarray
    pair: Optional[Tuple[int, int]] = None
    accident: Optional[np.ndarray] = None
    r_hat: Optional[Tensor] = None
    avoidance: Sequence[Avoidance] = field(default_factory=lambda: [Avoidance.UNKNOWN] * MAX_SLOTS)
    speed_limit: np.ndarray = field(default_factory=lambda: np.full(MAX_SLOTS, np.nan))
    reported_distance: Optional[float] = None


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def trajectory_loss(p_hat: Tensor, sup: DenseSupervision, beta: float = 1.0) -> Tuple[Tensor, int]:
    """Smooth-L1 position error averaged over coordinates, masked mean over supervised steps"""
    mask = sup.position_mask()
    if not mask.any():
        return _zero(), 0
    target = np.where(mask[:, :, None], np.nan_to_num(sup.xy), 0.0)
    err = ad.smooth_l1(p_hat, target, beta).mean(axis=2)
    return ad.masked_mean(err, mask), int(mask.sum())


def pair_loss(r_hat: Optional[Tensor], pair: Optional[Tuple[int, int]], sup: DenseSupervision) -> Tuple[Tensor, int]:
    """Mean L1 norm of the relative-motion error over steps valid for both vehicles of the pair"""
    if r_hat is None or pair is None:
        return _zero(), 0
    i, j = pair
    mask = sup.position_mask()
    mask = mask[i] & mask[j]
    if not mask.any():
        return _zero(), 0
    r_gt = np.where(mask[:, None], np.nan_to_num(sup.xy[j] - sup.xy[i]), 0.0)
    err = ad.tabs(r_hat - r_gt).sum(axis=1)
    return ad.masked_mean(err, mask), int(mask.sum())


def collision_loss(p_hat: Tensor, pair: Optional[Tuple[int, int]], accident: Optional[np.ndarray],
                   threshold: float, beta: float = 1.0) -> Tuple[Tensor, int]:
    """
    Contact at the closest step plus the distance of the pair midpoint to the accident location
    :return: loss and 1 when applied
    """
    if pair is None or accident is None:
        return _zero(), 0
    i, j = pair
    p_i, p_j = ad.getitem(p_hat, i), ad.getitem(p_hat, j)
    dist = ad.l2norm(p_i - p_j, axis=1)
    k = int(np.argmin(dist.data))
    contact = ad.smooth_l1(ad.relu(ad.getitem(dist, k) - threshold), 0.0, beta)
    mid = (ad.getitem(p_i, k) + ad.getitem(p_j, k)) * 0.5
    location = ad.smooth_l1(ad.l2norm(mid - accident), 0.0, beta)
    return contact + location, 1


def speed_loss(v_hat: Tensor, sup: DenseSupervision, policy: str = "edr_only") -> Tuple[Tensor, int]:
    mask = sup.speed_loss_mask(policy)
    if not mask.any():
        return _zero(), 0
    target = np.where(mask, np.nan_to_num(sup.v), 0.0)
    return ad.masked_mean(ad.tabs(v_hat - target), mask), int(mask.sum())


def behavior_loss(v_hat: Tensor, tau: Tensor, valid: np.ndarray, avoidance: Sequence[Avoidance]) -> Tuple[Tensor, int]:
    """
    Post-transition acceleration pattern per avoidance label: accelerating needs mean a >= 0,
    braking needs mean a <= 0, every other label (unknown included) keeps a close to its own mean
    """
    t = time_grid()[1:]
    terms = []
    for slot in range(MAX_SLOTS):
        label = avoidance[slot]
        if not valid[slot]:
            continue
        post = t > float(ad.getitem(tau, slot).data)
        if not post.any():
            continue
        v = ad.getitem(v_hat, slot)
        acc = (ad.getitem(v, slice(1, None)) - ad.getitem(v, slice(None, -1))) / DT
        mean_acc = ad.masked_mean(acc, post)
        if label in ACCELERATING:
            terms.append(ad.relu(-mean_acc))
        elif label in BRAKING:
            terms.append(ad.relu(mean_acc))
        else:
            terms.append(ad.masked_mean(ad.tabs(acc - mean_acc), post))
    if not terms:
        return _zero(), 0
    return ad.stack(terms, axis=0).mean(), len(terms)


def limit_loss(v_hat: Tensor, speed_limit: np.ndarray, valid: np.ndarray, delta_lim: float,
               beta: float = 1.0) -> Tuple[Tensor, int]:
    """Smooth-L1 on the excess over (speed limit + delta_lim) for vehicles with a known limit"""
    known = valid & np.isfinite(speed_limit)
    if not known.any():
        return _zero(), 0
    cap = np.where(known, np.nan_to_num(speed_limit), 0.0)[:, None] + delta_lim
    mask = np.repeat(known[:, None], K, axis=1)
    excess = ad.smooth_l1(ad.relu(v_hat - cap), 0.0, beta)
    return ad.masked_mean(excess, mask), int(mask.sum())


def smoothness_loss(p_hat: Tensor, valid: np.ndarray, theta0_deg: float, eps: float) -> Tuple[Tensor, int]:
    """Penalize turning by more than theta0 between consecutive non-stationary displacements"""
    disp = ad.getitem(p_hat, (slice(None), slice(1, None))) - ad.getitem(p_hat, (slice(None), slice(None, -1)))
    a = ad.getitem(disp, (slice(None), slice(1, None)))
    b = ad.getitem(disp, (slice(None), slice(None, -1)))
    norms = np.linalg.norm(disp.data, axis=2)
    mask = (norms[:, 1:] > eps) & (norms[:, :-1] > eps) & valid[:, None]
    if not mask.any():
        return _zero(), 0
    cos = ad.cos_sim(a, b, axis=2)
    return ad.masked_mean(ad.relu(float(np.cos(np.radians(theta0_deg))) - cos), mask), int(mask.sum())


def warmup_weight(step: int, warmup_steps: int) -> float:
    return 1.0 if warmup_steps <= 0 else min(1.0, step / warmup_steps)


def total_loss(inputs: LossInputs, sup: DenseSupervision, settings: ObjectiveSettings, step: int,
               warmup_steps: int, ramped: Sequence[str] = ("pair", "coll", "beh", "limit", "smooth")) -> LossBreakdown:
    """Weighted sum of all terms; ramped terms are scaled by min(1, step / warmup_steps)"""
    beta = settings.smooth_l1_beta
    computed = {
        "traj": trajectory_loss(inputs.p_hat, sup, beta),
        "pair": pair_loss(inputs.r_hat, inputs.pair, sup),
        "coll": collision_loss(inputs.p_hat, inputs.pair, inputs.accident,
                               contact_radius(settings.contact_threshold, inputs.reported_distance), beta),
        "spd": speed_loss(inputs.v_hat, sup, settings.speed_policy),
        "beh": behavior_loss(inputs.v_hat, inputs.tau, inputs.valid, inputs.avoidance),
        "limit": limit_loss(inputs.v_hat, inputs.speed_limit, inputs.valid, settings.delta_lim, beta),
        "smooth": smoothness_loss(inputs.p_hat, inputs.valid, settings.theta0_deg, settings.stationary_eps),
    }
    ramp = warmup_weight(step, warmup_steps)
    weights = {name: settings.weights[name] * (ramp if name in ramped else 1.0) for name in LOSS_NAMES}
    total = _zero()
    for name in LOSS_NAMES:
        total = total + computed[name][0] * weights[name]
    return LossBreakdown(
        terms={name: computed[name][0] for name in LOSS_NAMES},
        counts={name: computed[name][1] for name in LOSS_NAMES},
        weights=weights,
        total=total,
    )
