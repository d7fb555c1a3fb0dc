"""
Geometry-grounded decoder.

Per vehicle: coarse start, lane hypotheses scored by proximity and direction,
lane-consistent start, anchor path. A graph transformer over the 5 x K
space-time grid turns anchor cues into a dense increment branch and a
control-point branch blended by a learned gate. The collision pair is then
refined in relative coordinates and fused after its transition time, and the
terminal configuration is pulled onto the annotated accident location.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from crash_recon.core.config import DecoderSettings
from crash_recon.core.errors import NoLanesError
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tensor
from crash_recon.nn.layers import MLP, GraphTransformerLayer, Linear, Module
from crash_recon.schemas.case import DT, HORIZON, K, MAX_SLOTS, AccidentCase, ImpactSide, time_grid
from crash_recon.schemas.geometry import Polyline
from crash_recon.services.encoder import SEMANTIC_DIM, SceneInputs, SceneLatents, scene_center
from crash_recon.services.geometry import (
    DESCRIPTOR_DIM,
    SIDE_BUCKETS,
    march_along,
    nearest_on_lane,
    polyline_descriptor,
    project_onto_lane,
    side_bucket,
)

logger = logging.getLogger(__name__)

TIME_DIM = 7
POSITION_SCALE = 20.0
TAU_BIAS = 0.847  # sigmoid(0.847) = 0.7, i.e. an initial transition at -1.5 s


def time_features(t: np.ndarray) -> np.ndarray:
    """Fixed embedding of grid times: t/5 plus three sine/cosine pairs"""
    x = np.asarray(t, dtype=float) / HORIZON
    cols = [x]
    for m in (1, 2, 3):
        cols += [np.sin(np.pi * m * x), np.cos(np.pi * m * x)]
    return np.stack(cols, axis=-1)


def fit_basis(knot_steps: Sequence[int]) -> np.ndarray:
    """(K, R) matrix mapping control points at ``knot_steps`` to a C2 cubic interpolant on the grid"""
    t = time_grid()
    knots = t[list(knot_steps)]
    eye = np.eye(len(knots))
    return np.stack([CubicSpline(knots, eye[r])(t) for r in range(len(knots))], axis=1)


def control_steps(count: int) -> List[int]:
    return [int(round(r * (K - 1) / (count - 1))) for r in range(count)]


# ---- lane hypotheses ------------------------------------------------------

@dataclass
class LaneHypothesis:
    lane_id: str
    score: float
    distance: float
    cosine: float
    tangent: np.ndarray
    segment: int
    segment_t: float
    arc: float
    reverse: bool = False
    anchor_path: Optional[np.ndarray] = None
    logit: float = 0.0
    prob: float = 0.0


def score_lanes(start: Sequence[float], direction: Optional[Sequence[float]], lanes: Sequence[Polyline],
                lambda_dir: float, top_m: int) -> List[LaneHypothesis]:
    """
    Rank lanes by -(distance - lambda_dir * max(0, cos(u_i, u_m)))
    :param start: coarse start position
    :param direction: unit travel direction, None drops the direction term
    :return: top-M hypotheses, best first; ties broken by lane id
    """
    if not lanes:
        raise NoLanesError("scene has no lane centerlines")
    out = []
    for lane in lanes:
        dist, arc, tangent = nearest_on_lane(start, lane)
        cos = float(np.dot(direction, tangent)) if direction is not None else 0.0
        seg, seg_t = project_onto_lane(start, lane)
        out.append(LaneHypothesis(
            lane_id=lane.id,
            score=-(dist - lambda_dir * max(0.0, cos)),
            distance=dist,
            cosine=cos,
            tangent=tangent,
            segment=seg,
            segment_t=seg_t,
            arc=arc,
            reverse=direction is not None and cos < 0.0,
        ))
    out.sort(key=lambda h: (-h.score, h.lane_id))
    return out[:top_m]


def anchor_path(hypothesis: LaneHypothesis, lane: Polyline, speed: float, min_step: float) -> np.ndarray:
    """K points marching from the projection along the lane (against it when reversed)"""
    step = max(speed * DT, min_step)
    if hypothesis.reverse:
        step = -step
    return march_along(lane.as_array(), hypothesis.arc, step, K)


@dataclass
class DecoderInputs:
    """Numeric per-case inputs of the decoder beyond the latents"""
    valid: np.ndarray
    directions: np.ndarray
    direction_known: np.ndarray
    anchor_speed: np.ndarray
    accident: Optional[np.ndarray]
    center: np.ndarray
    lanes: List[Polyline]
    lane_descriptors: np.ndarray
    sides: np.ndarray
    pair: Optional[Tuple[int, int]]
    tau_star: np.ndarray
    speed_prior: np.ndarray
    speed_limit: np.ndarray


def decoder_inputs(case: AccidentCase, scene: SceneInputs, settings: DecoderSettings, extent: float,
                   use_supervision: bool = False) -> DecoderInputs:
    """
    Gather decoder inputs from a standardized case
    :param use_supervision: take the transition time and the EDR-based speed prior from attached supervision (training)
    """
    directions = np.zeros((MAX_SLOTS, 2))
    known = np.zeros(MAX_SLOTS, dtype=bool)
    limits = np.full(MAX_SLOTS, np.nan)
    for v in case.vehicles:
        if v.valid and v.travel_direction is not None:
            directions[v.slot_index] = v.travel_direction
            known[v.slot_index] = True
        if v.valid and v.speed_limit is not None:
            limits[v.slot_index] = v.speed_limit
    sides = np.zeros((MAX_SLOTS, len(ImpactSide)))
    members = list(ImpactSide)
    for slot, side in enumerate(case.annotations.impact_sides):
        sides[slot, members.index(side)] = 1.0
    lanes = list(case.geometry.lane_centerlines)
    descriptors = np.zeros((len(lanes), DESCRIPTOR_DIM))
    for n, lane in enumerate(lanes):
        d = polyline_descriptor(lane, extent)
        d[:2] = (d[:2] - scene.center) / (0.5 * extent)
        d[2] = d[2] / np.pi
        d[4:6] = d[4:6] / extent
        descriptors[n] = d
    tau_star = np.full(MAX_SLOTS, np.nan)
    prior = np.where(np.isnan(limits), np.inf, limits)
    sup = case.supervision
    if use_supervision and sup is not None:
        tau_star = np.asarray(sup.tau_star, dtype=float).copy()
        prior = np.where(sup.speed_strong, sup.speed_prior, prior)
    accident = case.annotations.accident_location
    return DecoderInputs(
        valid=np.array([v.valid for v in case.vehicles], dtype=bool),
        directions=directions,
        direction_known=known,
        anchor_speed=np.where(np.isnan(limits), settings.default_speed, limits),
        accident=None if accident is None else np.asarray(accident, dtype=float),
        center=scene_center(case),
        lanes=lanes,
        lane_descriptors=descriptors,
        sides=sides,
        pair=case.annotations.collision_pair,
        tau_star=tau_star,
        speed_prior=prior,
        speed_limit=limits,
    )


# ---- outputs --------------------------------------------------------------

@dataclass
class VehicleDecode:
    coarse_start: Tensor
    start: Tensor
    anchors: Tensor
    anchor_steps: np.ndarray
    hypotheses: List[LaneHypothesis] = field(default_factory=list)
    selected: Optional[int] = None
    anchor_free: bool = False


@dataclass
class PairRefinement:
    pair: Tuple[int, int]
    r_base: Tensor
    r_hat: Tensor
    gate: Tensor
    offsets: Tuple[Tensor, Tensor]


@dataclass
class DecoderOutput:
    p_geom: Tensor
    p_fuse: Tensor
    p_base: Tensor
    p_dense: Tensor
    p_fit: Tensor
    gamma: Tensor
    tau: Tensor
    tau_hat: Tensor
    starts: Tensor
    coarse_starts: Tensor
    vehicles: List[Optional[VehicleDecode]]
    refinement: Optional[PairRefinement] = None
    anchor_offset: Optional[Tensor] = None
    anchor_gates: Optional[Tensor] = None
    node_states: Optional[Tensor] = None
    flags: List[str] = field(default_factory=list)


# ---- differentiable pieces ------------------------------------------------

def dense_branch(start: Tensor, increments: Tensor) -> Tensor:
    """p_k = p_0 + sum of increments 1..k; the first increment row is ignored"""
    inc = ad.concat([np.zeros((1, 2)), ad.getitem(increments, slice(1, None))], axis=0)
    return ad.reshape(start, (1, 2)) + ad.cumsum(inc, axis=0)


def blend(p_dense: Tensor, p_fit: Tensor, gamma: Tensor) -> Tensor:
    g = ad.reshape(gamma, (1, 1))
    return (1.0 - g) * p_dense + g * p_fit


def pair_gate(tau_i: Tensor, tau_j: Tensor, lambda_tau: float) -> Tensor:
    """g_k = sigmoid(lambda_tau (t_k - mean transition time))"""
    center = (ad.as_tensor(tau_i) + ad.as_tensor(tau_j)) * 0.5
    return ad.sigmoid((time_grid() - center) * lambda_tau)


def fuse_pair(p_i: Tensor, p_j: Tensor, r_base: Tensor, r_hat: Tensor, gate: Tensor,
              shared: Tensor, split: Tensor):
    """
    Gated offsets whose terminal relative displacement equals r_hat at k = K
    :param shared: (K, 2) offset applied to both vehicles
    :param split: (K, 1) in [0, 1], share of the relative correction carried by vehicle i
    """
    g = ad.reshape(gate, (K, 1))
    g_end = ad.getitem(gate, K - 1)
    correction = (r_hat - r_base) / g_end
    off_i = shared - split * correction
    off_j = shared + (1.0 - split) * correction
    return p_i + g * off_i, p_j + g * off_j, (off_i, off_j)


def accident_offset(terminals: Sequence[Tensor], accident: np.ndarray) -> Tensor:
    """Accident location minus the mean terminal position of the given vehicles"""
    return ad.as_tensor(accident) - ad.stack(list(terminals), axis=0).mean(axis=0)


def anchor_correction(p: Tensor, tau: Tensor, offset: Tensor, lambda_a: float) -> Tuple[Tensor, Tensor]:
    gate = ad.sigmoid((time_grid() - tau) * lambda_a)
    return p + ad.reshape(gate, (K, 1)) * ad.reshape(offset, (1, 2)), gate


def project_start(coarse: Tensor, lane: Polyline, hypothesis: LaneHypothesis) -> Tensor:
    """Closest point of the lane, differentiable in the coarse start inside a segment"""
    pts = lane.as_array()
    a = pts[hypothesis.segment]
    d = pts[hypothesis.segment + 1] - a
    if 0.0 < hypothesis.segment_t < 1.0:
        t = ad.tsum((coarse - a) * d) / float(np.dot(d, d))
        return a + ad.reshape(t, (1,)) * d
    return Tensor(a + hypothesis.segment_t * d)


# ---- modules --------------------------------------------------------------

class GeoDecoder(Module):
    """Start, lane mixture, space-time graph transformer and base trajectory heads"""

    def __init__(self, settings: DecoderSettings, d_model: int, rng: np.random.Generator):
        d = d_model
        self.settings = settings
        self.d_model = d
        self.start_head = MLP([2 * d + SEMANTIC_DIM, d, 2], rng, zero_last=True)
        self.lane_head = MLP([1 + DESCRIPTOR_DIM, d, 1], rng, zero_last=True)
        self.node_in = Linear(d + 4 + TIME_DIM, d, rng)
        self.context_in = Linear(d, d, rng)
        self.edge_bias = Linear(3, settings.gt_heads, rng, gain=0.1)
        self.layers = [GraphTransformerLayer(d, settings.gt_heads, rng) for _ in range(settings.gt_layers)]
        self.step_head = Linear(d, 2, rng, zero=True)
        self.control_head = Linear(d, 2, rng, zero=True)
        self.gamma_head = Linear(d, 1, rng, zero=True)
        self.tau_head = Linear(d, 1, rng, zero=True)
        self.tau_head.bias.data[:] = TAU_BIAS
        self._steps = control_steps(settings.control_points)
        self._basis = fit_basis(self._steps)

    # -- per vehicle ---------------------------------------------------------

    def prior_start(self, slot: int, inputs: DecoderInputs) -> np.ndarray:
        """Accident location minus direction * speed * 5 s when both are known, the location alone, else the scene center"""
        if inputs.accident is None:
            return inputs.center.copy()
        if inputs.direction_known[slot]:
            return inputs.accident - inputs.directions[slot] * inputs.anchor_speed[slot] * HORIZON
        return inputs.accident.copy()

    def predict_start(self, z: Tensor, context: Tensor, semantics: np.ndarray, prior: np.ndarray) -> Tensor:
        residual = self.start_head(ad.concat([z, context, ad.as_tensor(semantics)], axis=0))
        return prior + residual * self.settings.start_scale

    def _anchor_free(self, slot: int, coarse: Tensor, inputs: DecoderInputs) -> VehicleDecode:
        if inputs.direction_known[slot]:
            u = inputs.directions[slot]
        elif inputs.accident is not None and np.linalg.norm(inputs.accident - coarse.data) > 1e-9:
            u = (inputs.accident - coarse.data) / np.linalg.norm(inputs.accident - coarse.data)
        else:
            u = np.array([1.0, 0.0])
        step = max(inputs.anchor_speed[slot] * DT, self.settings.anchor_min_step)
        offsets = np.arange(K)[:, None] * step * u
        anchors = ad.reshape(coarse, (1, 2)) + offsets
        return VehicleDecode(coarse, coarse, anchors, np.diff(offsets, axis=0, prepend=offsets[:1]),
                             anchor_free=True)

    def select_lane(self, slot: int, coarse: Tensor, inputs: DecoderInputs) -> VehicleDecode:
        """Lane mixture with straight-through argmax selection; anchor-free when no lane is usable"""
        if not self.settings.use_lane_candidates:
            return self._anchor_free(slot, coarse, inputs)
        direction = inputs.directions[slot] if inputs.direction_known[slot] else None
        try:
            hyps = score_lanes(coarse.data, direction, inputs.lanes, self.settings.lambda_dir, self.settings.top_m)
        except NoLanesError:
            logger.debug(f"slot {slot}: no lane centerlines, decoding anchor-free")
            return self._anchor_free(slot, coarse, inputs)
        lanes = {lane.id: lane for lane in inputs.lanes}
        index = {lane.id: n for n, lane in enumerate(inputs.lanes)}
        features = np.stack([
            np.concatenate([[h.score / 10.0], inputs.lane_descriptors[index[h.lane_id]]]) for h in hyps
        ])
        logits = ad.reshape(self.lane_head(features), (len(hyps),)) + np.array([h.score for h in hyps])
        probs = ad.softmax(logits, axis=0)
        best = int(np.argmax(probs.data))
        for n, h in enumerate(hyps):
            h.logit, h.prob = float(logits.data[n]), float(probs.data[n])
            h.anchor_path = anchor_path(h, lanes[h.lane_id], inputs.anchor_speed[slot], self.settings.anchor_min_step)
        chosen = hyps[best]
        selected = ad.getitem(probs, best)
        st = selected / ad.stop_gradient(selected)
        start = project_start(coarse, lanes[chosen.lane_id], chosen)
        offsets = chosen.anchor_path - chosen.anchor_path[0]
        anchors = ad.reshape(start, (1, 2)) + ad.reshape(st, (1, 1)) * offsets
        steps = np.diff(chosen.anchor_path, axis=0, prepend=chosen.anchor_path[:1])
        return VehicleDecode(coarse, start, anchors, steps, hyps, best)

    # -- graph ---------------------------------------------------------------

    def graph(self, anchors: np.ndarray, valid: np.ndarray):
        """Adjacency (N, N), node mask (N,) and edge features (N, N, 3) over the 5 x K grid"""
        n = MAX_SLOTS * K
        slot = np.repeat(np.arange(MAX_SLOTS), K)
        step = np.tile(np.arange(K), MAX_SLOTS)
        pos = anchors.reshape(n, 2)
        rel = pos[None, :, :] - pos[:, None, :]
        dist = np.linalg.norm(rel, axis=2)
        same_slot = slot[:, None] == slot[None, :]
        dk = step[None, :] - step[:, None]
        temporal = same_slot & (np.abs(dk) <= 1)
        interaction = ~same_slot & (dk == 0) & (dist <= self.settings.interaction_radius)
        radius = self.settings.interaction_radius
        features = np.concatenate([rel / radius, (dk * DT / 0.5)[:, :, None]], axis=2)
        return temporal | interaction, np.repeat(valid, K), features

    def __call__(self, latents: SceneLatents, inputs: DecoderInputs, teacher_forcing: float = 0.0) -> DecoderOutput:
        s = self.settings
        valid = inputs.valid
        zero2 = Tensor(np.zeros(2))
        vehicles: List[Optional[VehicleDecode]] = [None] * MAX_SLOTS
        tfeat = time_features(time_grid())
        node_rows = []
        for slot in range(MAX_SLOTS):
            if not valid[slot]:
                node_rows.append(Tensor(np.zeros((K, self.d_model))))
                continue
            z = ad.getitem(latents.vehicle_tokens, slot)
            coarse = self.predict_start(z, latents.context, latents.semantics[slot], self.prior_start(slot, inputs))
            vd = self.select_lane(slot, coarse, inputs)
            vehicles[slot] = vd
            cues = np.concatenate([(vd.anchors.data - vd.start.data) / POSITION_SCALE, vd.anchor_steps / 2.0, tfeat], axis=1)
            z_tile = ad.reshape(z, (1, self.d_model)) + np.zeros((K, 1))
            x = self.node_in(ad.concat([z_tile, ad.as_tensor(cues)], axis=1)) + self.context_in(latents.context)
            node_rows.append(x)

        anchor_values = np.stack([
            vehicles[i].anchors.data if vehicles[i] is not None else np.zeros((K, 2)) for i in range(MAX_SLOTS)
        ])
        adjacency, node_mask, edge_features = self.graph(anchor_values, valid)
        bias = ad.transpose(self.edge_bias(edge_features), (2, 0, 1))
        h = ad.concat(node_rows, axis=0)
        for layer in self.layers:
            h = layer(h, adjacency, node_mask, bias)
        h = ad.reshape(h, (MAX_SLOTS, K, self.d_model))

        dense, fit, base, gammas, taus, tau_hats, starts, coarse_starts = [], [], [], [], [], [], [], []
        for slot in range(MAX_SLOTS):
            vd = vehicles[slot]
            if vd is None:
                for bucket in (dense, fit, base):
                    bucket.append(Tensor(np.zeros((K, 2))))
                for bucket in (gammas, taus, tau_hats):
                    bucket.append(Tensor(np.zeros(1)))
                starts.append(zero2)
                coarse_starts.append(zero2)
                continue
            hs = ad.getitem(h, slot)
            anchor_inc = ad.concat([np.zeros((1, 2)), ad.getitem(vd.anchors, slice(1, None)) - ad.getitem(vd.anchors, slice(None, -1))], axis=0)
            p_dense = dense_branch(vd.start, anchor_inc + self.step_head(hs) * s.step_scale)
            ctrl = self.control_head(ad.take(hs, self._steps[1:], axis=0)) * s.control_scale + ad.take(vd.anchors, self._steps[1:], axis=0)
            q = ad.concat([ad.reshape(vd.start, (1, 2)), ctrl], axis=0)
            p_fit = ad.matmul(Tensor(self._basis), q)
            pooled = hs.mean(axis=0)
            gamma = Tensor(np.zeros(1)) if vd.anchor_free else ad.sigmoid(self.gamma_head(pooled))
            tau_hat = ad.sigmoid(self.tau_head(pooled)) * HORIZON - HORIZON
            tau = tau_hat
            if teacher_forcing > 0.0 and np.isfinite(inputs.tau_star[slot]):
                tau = tau_hat * (1.0 - teacher_forcing) + teacher_forcing * inputs.tau_star[slot]
            dense.append(p_dense)
            fit.append(p_fit)
            base.append(blend(p_dense, p_fit, gamma))
            gammas.append(gamma)
            taus.append(tau)
            tau_hats.append(tau_hat)
            starts.append(vd.start)
            coarse_starts.append(vd.coarse_start)

        return DecoderOutput(
            p_geom=ad.stack(base, axis=0),
            p_fuse=ad.stack(base, axis=0),
            p_base=ad.stack(base, axis=0),
            p_dense=ad.stack(dense, axis=0),
            p_fit=ad.stack(fit, axis=0),
            gamma=ad.reshape(ad.stack(gammas, axis=0), (MAX_SLOTS,)),
            tau=ad.reshape(ad.stack(taus, axis=0), (MAX_SLOTS,)),
            tau_hat=ad.reshape(ad.stack(tau_hats, axis=0), (MAX_SLOTS,)),
            starts=ad.stack(starts, axis=0),
            coarse_starts=ad.stack(coarse_starts, axis=0),
            vehicles=vehicles,
            node_states=h,
        )


class PairRefiner(Module):
    """Relative-motion refinement of the collision pair and its gated fusion"""

    def __init__(self, settings: DecoderSettings, d_model: int, rng: np.random.Generator):
        d = d_model
        self.settings = settings
        self.d_model = d
        self.token = Linear(2 * d + 2 + 2 * len(ImpactSide) + len(SIDE_BUCKETS) + 1, d, rng)
        self.node_in = Linear(d + TIME_DIM + 2, d, rng)
        self.layers = [GraphTransformerLayer(d, settings.gt_heads, rng) for _ in range(settings.pair_layers)]
        self.delta_head = Linear(d, 2, rng, zero=True)
        self.shared_head = Linear(d, 2, rng, zero=True)
        self.split_head = Linear(d, 1, rng, zero=True)

    def pair_token(self, latents: SceneLatents, out: DecoderOutput, inputs: DecoderInputs, i: int, j: int) -> Tensor:
        z_i = ad.getitem(latents.vehicle_tokens, i)
        z_j = ad.getitem(latents.vehicle_tokens, j)
        start_diff = (ad.getitem(out.starts, j) - ad.getitem(out.starts, i)) / POSITION_SCALE
        base = out.p_base.data
        heading = base[i, -1] - base[i, -2]
        relative = np.zeros(len(SIDE_BUCKETS))
        if np.linalg.norm(heading) > 1e-9:
            relative[SIDE_BUCKETS.index(side_bucket(heading, base[j, -1] - base[i, -1]))] = 1.0
        mean_tau = (ad.getitem(out.tau, i) + ad.getitem(out.tau, j)) * (0.5 / HORIZON)
        return self.token(ad.concat([
            z_i, z_j, start_diff, ad.as_tensor(inputs.sides[i]), ad.as_tensor(inputs.sides[j]),
            ad.as_tensor(relative), ad.reshape(mean_tau, (1,)),
        ], axis=0))

    def __call__(self, latents: SceneLatents, out: DecoderOutput, inputs: DecoderInputs) -> DecoderOutput:
        if inputs.pair is None:
            out.flags.append("pair_refinement_skipped")
            return out
        i, j = inputs.pair
        p_i, p_j = ad.getitem(out.p_base, i), ad.getitem(out.p_base, j)
        r_base = p_j - p_i
        token = self.pair_token(latents, out, inputs, i, j)
        tfeat = time_features(time_grid())
        x = self.node_in(ad.concat([ad.reshape(token, (1, self.d_model)) + np.zeros((K, 1)), ad.as_tensor(tfeat),
                                    r_base / POSITION_SCALE], axis=1))
        steps = np.arange(K)
        adjacency = np.abs(steps[:, None] - steps[None, :]) <= 1
        mask = np.ones(K, dtype=bool)
        for layer in self.layers:
            x = layer(x, adjacency, mask)
        r_hat = r_base + ad.cumsum(self.delta_head(x), axis=0)
        gate = pair_gate(ad.getitem(out.tau, i), ad.getitem(out.tau, j), self.settings.lambda_tau)
        fused_i, fused_j, offsets = fuse_pair(p_i, p_j, r_base, r_hat, gate, self.shared_head(x),
                                              ad.sigmoid(self.split_head(x)))
        rows = [ad.getitem(out.p_base, n) for n in range(MAX_SLOTS)]
        rows[i], rows[j] = fused_i, fused_j
        out.p_fuse = ad.stack(rows, axis=0)
        out.p_geom = out.p_fuse
        out.refinement = PairRefinement((i, j), r_base, r_hat, gate, offsets)
        return out


def anchor_members(inputs: DecoderInputs, settings: DecoderSettings) -> List[int]:
    """Valid vehicles by default; only the collision pair when ``anchor_vehicles`` is "pair" and a pair is known"""
    if settings.anchor_vehicles == "pair" and inputs.pair is not None:
        return [n for n in inputs.pair if inputs.valid[n]]
    return [n for n in range(MAX_SLOTS) if inputs.valid[n]]


def anchor_to_accident(out: DecoderOutput, inputs: DecoderInputs, settings: DecoderSettings) -> DecoderOutput:
    """Shift the anchored vehicles by a gated share of (accident location - their mean terminal position)"""
    members = anchor_members(inputs, settings)
    if inputs.accident is None or not members:
        out.flags.append("accident_anchor_skipped")
        out.p_geom = out.p_fuse
        return out
    terminals = [ad.getitem(out.p_fuse, (n, K - 1)) for n in members]
    offset = accident_offset(terminals, inputs.accident)
    rows, gates = [], []
    for n in range(MAX_SLOTS):
        p = ad.getitem(out.p_fuse, n)
        if n not in members:
            rows.append(p)
            gates.append(Tensor(np.zeros(K)))
            continue
        shifted, gate = anchor_correction(p, ad.getitem(out.tau, n), offset, settings.lambda_a)
        rows.append(shifted)
        gates.append(gate)
    out.p_geom = ad.stack(rows, axis=0)
    out.anchor_offset = offset
    out.anchor_gates = ad.stack(gates, axis=0)
    return out


def lane_summary(vd: Optional[VehicleDecode]) -> Dict[str, object]:
    if vd is None or vd.anchor_free or vd.selected is None:
        return {"lane_id": None, "lane_candidates": [], "lane_probs": []}
    return {
        "lane_id": vd.hypotheses[vd.selected].lane_id,
        "lane_candidates": [h.lane_id for h in vd.hypotheses],
        "lane_probs": [h.prob for h in vd.hypotheses],
    }
