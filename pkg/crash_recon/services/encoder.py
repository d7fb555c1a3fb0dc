"""
Scene encoder: road raster + polyline descriptors, vehicle semantics and
report text are turned into road tokens, vehicle tokens and one scene context.
"""

import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from crash_recon.core.config import EncoderSettings, GeometrySettings
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tensor
from crash_recon.nn.layers import MLP, Conv2d, Linear, Module, MultiHeadAttention
from crash_recon.schemas.case import (
    MAX_SLOTS,
    AccidentCase,
    Avoidance,
    ImpactSide,
    Lighting,
    Locality,
    PreMovement,
    RoadCondition,
    VehicleCategory,
    VehicleSemantics,
    Weather,
)
from crash_recon.schemas.geometry import GeometryFrame
from crash_recon.services.geometry import DESCRIPTOR_DIM, all_vertices, polyline_descriptor, polyline_tensor, rasterize

logger = logging.getLogger(__name__)

SPEED_SCALE = 30.0
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _onehot(value, enum_cls) -> np.ndarray:
    members = list(enum_cls)
    out = np.zeros(len(members))
    out[members.index(value)] = 1.0
    return out


SEMANTIC_DIM = (len(VehicleCategory) + len(PreMovement) + len(Avoidance) + len(ImpactSide)) + 3 + 2 + 1
SCENE_DIM = len(Lighting) + len(Weather) + len(RoadCondition) + len(Locality)


def hash_text(text: str, buckets: int, seed: int) -> np.ndarray:
    """
    Signed feature hash of lowercased word tokens
    :return: bucket vector scaled by 1/sqrt(token count)
    """
    out = np.zeros(buckets)
    tokens = _TOKEN_RE.findall(text.lower())
    key = seed.to_bytes(8, "little")
    for token in tokens:
        digest = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest(), "little")
        out[digest % buckets] += 1.0 if (digest >> 63) & 1 else -1.0
    if tokens:
        out /= np.sqrt(len(tokens))
    return out


def semantic_vector(vehicle: VehicleSemantics, impact_side: ImpactSide) -> np.ndarray:
    """Numeric semantics b_i: one-hot blocks, direction, speed limit and lane availability"""
    if not vehicle.valid:
        return np.zeros(SEMANTIC_DIM)
    direction = vehicle.travel_direction
    limit = vehicle.speed_limit
    return np.concatenate([
        _onehot(vehicle.category, VehicleCategory),
        _onehot(vehicle.pre_movement, PreMovement),
        _onehot(vehicle.avoidance, Avoidance),
        _onehot(impact_side, ImpactSide),
        [direction[0], direction[1], 1.0] if direction else [0.0, 0.0, 0.0],
        [limit / SPEED_SCALE, 1.0] if limit is not None else [0.0, 0.0],
        [1.0 if vehicle.initial_lane is not None else 0.0],
    ])


@dataclass
class SceneInputs:
    """Numeric encoder inputs of one north-up case"""
    raster: np.ndarray
    cell_positions: np.ndarray
    descriptors: np.ndarray
    descriptor_mask: np.ndarray
    semantics: np.ndarray
    vehicle_text: np.ndarray
    vehicle_mask: np.ndarray
    scene_text: np.ndarray
    speed_cues: np.ndarray
    center: np.ndarray
    empty_geometry: bool = False
    polyline_ids: List[str] = field(default_factory=list)


@dataclass
class SceneLatents:
    context: Tensor
    vehicle_tokens: Tensor
    vehicle_mask: np.ndarray
    road_tokens: Tensor
    road_mask: np.ndarray
    pooled_road: Tensor
    pooled_vehicles: Tensor
    refined_text: Tensor
    speed_cues: Tensor
    semantics: np.ndarray
    empty_geometry: bool = False
    vehicle_attention: Optional[Tensor] = None
    road_attention: Optional[Tensor] = None


def scene_center(case: AccidentCase) -> np.ndarray:
    """Raster center: the accident location when annotated, else the vertex centroid"""
    if case.annotations.accident_location is not None:
        return np.asarray(case.annotations.accident_location, dtype=float)
    verts = all_vertices(case.geometry)
    return verts.mean(axis=0) if len(verts) else np.zeros(2)


def featurize(case: AccidentCase, encoder: EncoderSettings, geometry: GeometrySettings) -> SceneInputs:
    """Rasterize, describe and hash one standardized case"""
    geom = case.geometry
    if geom.frame != GeometryFrame.NORTH_UP:
        raise ValueError("featurize expects a north-up case; run standardize_case first")
    center = scene_center(case)
    extent = geometry.extent
    raster = rasterize(geom, geometry.raster_resolution, extent, center)
    empty = raster.empty or geom.is_empty()
    if empty:
        logger.warning(f"case {case.case_id}: road geometry is empty, road tokens are masked")

    grid = geometry.raster_size // 16
    cells = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
    rows, cols = np.meshgrid(cells, cells, indexing="ij")
    cell_positions = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1)

    descriptors = np.zeros((geometry.max_polylines, DESCRIPTOR_DIM))
    descriptor_mask = np.zeros(geometry.max_polylines, dtype=bool)
    points, point_mask, polys = polyline_tensor(geom, geometry.max_polylines, geometry.max_points)
    for n, poly in enumerate(polys):
        sampled = poly.model_copy(update={"points": [tuple(p) for p in points[n, point_mask[n]]]})
        d = polyline_descriptor(sampled, extent)
        d[:2] = (d[:2] - center) / (0.5 * extent)
        d[2] = d[2] / np.pi
        d[4:6] = d[4:6] / extent
        descriptors[n] = d
        descriptor_mask[n] = True

    semantics = np.stack([
        semantic_vector(v, case.annotations.impact_sides[v.slot_index]) for v in case.vehicles
    ])
    vehicle_text = np.stack([
        hash_text(v.description, encoder.text_buckets, encoder.hash_seed) if v.valid else np.zeros(encoder.text_buckets)
        for v in case.vehicles
    ])
    vehicle_mask = np.array([v.valid for v in case.vehicles], dtype=bool)
    scene = case.scene
    scene_text = np.concatenate([
        hash_text(scene.summary_text, encoder.text_buckets, encoder.hash_seed),
        _onehot(scene.lighting, Lighting),
        _onehot(scene.weather, Weather),
        _onehot(scene.road_condition, RoadCondition),
        _onehot(scene.locality, Locality),
    ])
    limits = np.zeros(MAX_SLOTS)
    known = np.zeros(MAX_SLOTS)
    for v in case.vehicles:
        if v.valid and v.speed_limit is not None:
            limits[v.slot_index] = v.speed_limit / SPEED_SCALE
            known[v.slot_index] = 1.0
    return SceneInputs(
        raster=raster.grid.astype(np.float64),
        cell_positions=cell_positions,
        descriptors=descriptors,
        descriptor_mask=descriptor_mask,
        semantics=semantics,
        vehicle_text=vehicle_text,
        vehicle_mask=vehicle_mask,
        scene_text=scene_text,
        speed_cues=np.concatenate([limits, known]),
        center=center,
        empty_geometry=bool(empty),
        polyline_ids=[p.id for p in polys],
    )


class SceneEncoder(Module):
    """Road, vehicle and text pathways fused into the scene context c"""

    def __init__(self, settings: EncoderSettings, channels: int, rng: np.random.Generator):
        d = settings.d_model
        c1, c2 = settings.conv_channels
        self.d_model = d
        self.buckets = settings.text_buckets
        self.conv1 = Conv2d(channels, c1, 4, 4, rng)
        self.conv2 = Conv2d(c1, c2, 2, 2, rng)
        self.conv3 = Conv2d(c2, d, 2, 2, rng)
        self.cell_pos = Linear(2, d, rng)
        self.sparse = Linear(DESCRIPTOR_DIM, d, rng)
        self.vehicle = MLP([SEMANTIC_DIM + settings.text_buckets, d, d], rng)
        self.text = Linear(settings.text_buckets + SCENE_DIM, d, rng)
        self.attend_vehicles = MultiHeadAttention(d, settings.heads, rng)
        self.attend_road = MultiHeadAttention(d, settings.heads, rng)
        self.speed = Linear(2 * MAX_SLOTS, d, rng)
        self.fuse = MLP([4 * d, d, d], rng)

    def encode_road(self, inputs: SceneInputs):
        """Dense conv-grid tokens followed by sparse polyline tokens; returns (tokens, mask, pooled)"""
        h = ad.relu(self.conv1(inputs.raster))
        h = ad.relu(self.conv2(h))
        h = self.conv3(h)
        n_dense = h.shape[1] * h.shape[2]
        dense = ad.transpose(ad.reshape(h, (self.d_model, n_dense)), (1, 0)) + self.cell_pos(inputs.cell_positions)
        sparse = self.sparse(inputs.descriptors)
        dense_mask = np.full(n_dense, not inputs.empty_geometry)
        mask = np.concatenate([dense_mask, inputs.descriptor_mask])
        tokens = ad.concat([dense, sparse], axis=0) * mask.astype(np.float64)[:, None]
        pooled = ad.masked_mean(tokens, mask[:, None], axis=0)
        return tokens, mask, pooled

    def encode_vehicles(self, inputs: SceneInputs):
        """Vehicle tokens z_i; invalid slots are exactly zero"""
        features = np.concatenate([inputs.semantics, inputs.vehicle_text], axis=1)
        tokens = self.vehicle(features) * inputs.vehicle_mask.astype(np.float64)[:, None]
        return tokens, inputs.vehicle_mask

    def ground_text(self, text: Tensor, vehicle_tokens: Tensor, vehicle_mask: np.ndarray,
                    road_tokens: Tensor, road_mask: np.ndarray):
        """Residual cross-attention of the text embedding onto vehicles, then onto road tokens"""
        query = ad.reshape(text, (1, self.d_model))
        h, w_veh = self.attend_vehicles(query, vehicle_tokens, vehicle_tokens, vehicle_mask)
        t_veh = query + h
        h, w_road = self.attend_road(t_veh, road_tokens, road_tokens, road_mask)
        t_road = t_veh + h
        return ad.reshape(t_road, (self.d_model,)), w_veh, w_road

    def fuse_context(self, pooled_road: Tensor, pooled_vehicles: Tensor, refined_text: Tensor,
                     speed_cues: Tensor) -> Tensor:
        return self.fuse(ad.concat([pooled_road, pooled_vehicles, refined_text, speed_cues], axis=0))

    def __call__(self, inputs: SceneInputs) -> SceneLatents:
        road, road_mask, pooled_road = self.encode_road(inputs)
        vehicles, vehicle_mask = self.encode_vehicles(inputs)
        pooled_vehicles = ad.masked_mean(vehicles, vehicle_mask[:, None], axis=0)
        text = self.text(inputs.scene_text)
        refined, w_veh, w_road = self.ground_text(text, vehicles, vehicle_mask, road, road_mask)
        speed = self.speed(inputs.speed_cues)
        context = self.fuse_context(pooled_road, pooled_vehicles, refined, speed)
        return SceneLatents(
            context=context,
            vehicle_tokens=vehicles,
            vehicle_mask=vehicle_mask,
            road_tokens=road,
            road_mask=road_mask,
            pooled_road=pooled_road,
            pooled_vehicles=pooled_vehicles,
            refined_text=refined,
            speed_cues=speed,
            semantics=inputs.semantics,
            empty_geometry=inputs.empty_geometry,
            vehicle_attention=w_veh,
            road_attention=w_road,
        )
