"""
Timing allocator: re-times a geometric path on the fixed 0.1 s grid.

Step lengths of the path are scaled by bounded learned factors, passed
through a monotone physical projection (soft speed cap, soft jerk limit),
accumulated, clamped to the path length and resampled along the path.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from crash_recon.core.config import TimingSettings
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tensor
from crash_recon.nn.layers import MLP, Module
from crash_recon.schemas.case import DT, HORIZON, K, MAX_SLOTS, time_grid
from crash_recon.services.decoder import TIME_DIM, DecoderInputs, DecoderOutput, time_features
from crash_recon.services.encoder import SEMANTIC_DIM, SPEED_SCALE, SceneLatents

logger = logging.getLogger(__name__)

STATIONARY_LENGTH = 1e-9


def step_lengths(p: Tensor) -> Tensor:
    """(K-1,) lengths of consecutive displacements of a (K, 2) path"""
    return ad.l2norm(ad.getitem(p, slice(1, None)) - ad.getitem(p, slice(None, -1)), axis=1)


def soft_speed_cap(d: Tensor, prior: float, delta_lim: float, sharpness: float) -> Tensor:
    """d - softplus_beta(d - cap) with cap = (prior + delta_lim) dt; never exceeds the cap"""
    cap = (prior + delta_lim) * DT
    return d - ad.softplus(d - cap, sharpness)


def jerk_limit(d: Tensor, bounds: np.ndarray, softness: float) -> Tensor:
    """
    Pull steps whose second difference exceeds the per-step bound toward their neighbors
    :param d: (n,) step lengths
    :param bounds: (n,) second-difference bounds in meters (jerk * dt^3)
    """
    padded = ad.concat([ad.getitem(d, slice(0, 1)), d, ad.getitem(d, slice(-1, None))], axis=0)
    second = ad.getitem(padded, slice(2, None)) - ad.getitem(padded, slice(1, -1)) * 2.0 + ad.getitem(padded, slice(None, -2))
    excess = second - ad.clamp_soft(second, -bounds, bounds, softness / bounds)
    return d + excess * 0.25


def jerk_bounds(jerk: float, tau: float, scale: float, sharpness: float) -> np.ndarray:
    """Second-difference bound per step, relaxed by ``scale`` after the transition"""
    t = time_grid()[1:]
    gate = 1.0 / (1.0 + np.exp(-sharpness * (t - tau)))
    return jerk * DT ** 3 * (1.0 + (scale - 1.0) * gate)


def physical_projection(d: Tensor, prior: float, tau: float, settings: TimingSettings) -> Tensor:
    """Monotone non-decreasing map of step lengths; non-finite bounds skip their stage"""
    if np.isfinite(prior):
        d = soft_speed_cap(d, prior, settings.delta_lim, settings.cap_sharpness)
    if np.isfinite(settings.jerk_bound):
        bounds = jerk_bounds(settings.jerk_bound, tau, settings.post_transition_jerk_scale,
                             settings.transition_sharpness)
        d = jerk_limit(d, bounds, settings.jerk_softness)
    return ad.relu(d)


def cumulative_arc(d: Tensor, total: Tensor) -> Tensor:
    """l_0 = 0, l_k = sum of the first k steps, clamped to total"""
    ell = ad.concat([np.zeros(1), ad.cumsum(d, axis=0)], axis=0)
    return ell - ad.relu(ell - total)


def resample_along(p: Tensor, cum: Tensor, ell: Tensor) -> Tensor:
    """Positions at arc lengths ``ell`` along the polyline ``p`` with vertex arcs ``cum``"""
    j = np.clip(np.searchsorted(cum.data, ell.data, side="left"), 1, K - 1)
    lo, hi = ad.take(cum, j - 1), ad.take(cum, j)
    seg = hi - lo
    degenerate = seg.data < 1e-12
    frac = ad.where(degenerate, 0.0, (ell - lo) / ad.where(degenerate, 1.0, seg))
    p_lo, p_hi = ad.take(p, j - 1, axis=0), ad.take(p, j, axis=0)
    return p_lo + ad.reshape(frac, (K, 1)) * (p_hi - p_lo)


def step_speeds(p: Tensor) -> Tensor:
    """v_k = |p_k - p_(k-1)| / dt for k >= 1, v_0 = v_1"""
    v = step_lengths(p) / DT
    return ad.concat([ad.getitem(v, slice(0, 1)), v], axis=0)


@dataclass
class Allocation:
    positions: Tensor
    speeds: Tensor
    arc: Tensor
    length: float


def allocate(p: Tensor, delta: Tensor, prior: float, tau: float, settings: TimingSettings) -> Allocation:
    """
    Re-time one path
    :param p: (K, 2) geometric path
    :param delta: (K,) bounded log-scale factors; entry k scales step k, entry 0 is unused
    :param prior: speed prior of the cap, inf when unknown
    :param tau: transition time used by the jerk relaxation
    """
    d_geom = step_lengths(p)
    cum = ad.concat([np.zeros(1), ad.cumsum(d_geom, axis=0)], axis=0)
    total = ad.getitem(cum, K - 1)
    if total.data < STATIONARY_LENGTH:
        return Allocation(p, Tensor(np.zeros(K)), cum, 0.0)
    d = d_geom * ad.exp(ad.getitem(delta, slice(1, None)))
    d = physical_projection(d, prior, tau, settings)
    ell = cumulative_arc(d, total)
    positions = resample_along(p, cum, ell)
    return Allocation(positions, step_speeds(positions), ell, float(total.data))


@dataclass
class TimingOutput:
    p_hat: Tensor
    v_hat: Tensor
    delta: Tensor
    arc: Optional[Tensor] = None


class TimingAllocator(Module):
    """Per-step bounded log-scale head plus the re-timing of every valid vehicle"""

    def __init__(self, settings: TimingSettings, d_model: int, rng: np.random.Generator):
        self.settings = settings
        self.d_model = d_model
        self.head = MLP([d_model + SEMANTIC_DIM + 3 + TIME_DIM, d_model, 1], rng, zero_last=True)

    def deltas(self, z: Tensor, semantics: np.ndarray, speed_limit: float, tau: Tensor) -> Tensor:
        """delta_k = B tanh(raw_k / B), so |delta| < B and exp(delta) lies in (1/3, 3) by default"""
        bound = self.settings.delta_step_bound
        known = np.isfinite(speed_limit)
        cues = np.concatenate([
            np.broadcast_to(semantics, (K, SEMANTIC_DIM)),
            np.tile([speed_limit / SPEED_SCALE if known else 0.0, float(known)], (K, 1)),
            time_features(time_grid()),
        ], axis=1)
        z_tile = ad.reshape(z, (1, self.d_model)) + np.zeros((K, 1))
        tau_tile = ad.reshape(tau, (1, 1)) / HORIZON + np.zeros((K, 1))
        raw = ad.reshape(self.head(ad.concat([z_tile, ad.as_tensor(cues), tau_tile], axis=1)), (K,))
        return ad.tanh(raw / bound) * bound

    def __call__(self, latents: SceneLatents, decoded: DecoderOutput, inputs: DecoderInputs) -> TimingOutput:
        positions, speeds, deltas, arcs = [], [], [], []
        for slot in range(MAX_SLOTS):
            p = ad.getitem(decoded.p_geom, slot)
            if not inputs.valid[slot]:
                positions.append(p)
                speeds.append(Tensor(np.zeros(K)))
                deltas.append(Tensor(np.zeros(K)))
                arcs.append(Tensor(np.zeros(K)))
                continue
            tau = ad.getitem(decoded.tau, slot)
            if not self.settings.enabled:
                positions.append(p)
                speeds.append(step_speeds(p))
                deltas.append(Tensor(np.zeros(K)))
                arcs.append(ad.concat([np.zeros(1), ad.cumsum(step_lengths(p), axis=0)], axis=0))
                continue
            delta = self.deltas(ad.getitem(latents.vehicle_tokens, slot), latents.semantics[slot],
                                inputs.speed_limit[slot], tau)
            out = allocate(p, delta, float(inputs.speed_prior[slot]), float(tau.data), self.settings)
            if out.length == 0.0:
                logger.debug(f"slot {slot}: stationary path, timing skipped")
            positions.append(out.positions)
            speeds.append(out.speeds)
            deltas.append(delta)
            arcs.append(out.arc)
        return TimingOutput(
            p_hat=ad.stack(positions, axis=0),
            v_hat=ad.stack(speeds, axis=0),
            delta=ad.stack(deltas, axis=0),
            arc=ad.stack(arcs, axis=0),
        )
