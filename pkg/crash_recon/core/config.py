"""
Settings management for crash_recon.

Every design constant of the pipeline lives here as a validated field so that
CLI flags and TOML files can override it. Precedence, highest first: explicit
overrides > TOML file > environment (CRASH_RECON_*) > .env > defaults.
"""

import math
import tomllib
from copy import deepcopy
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from crash_recon.schemas.synth import DegradationProfile, ScenarioFamily

PARAM_GROUPS = ("encoder", "decoder", "pair", "timing")
LOSS_NAMES = ("traj", "pair", "coll", "spd", "beh", "limit", "smooth")


class GeometrySettings(BaseModel):
    raster_resolution: float = Field(0.5, gt=0, description="BEV cell size (m/cell)")
    raster_size: int = Field(128, ge=16, le=512, description="BEV cells per side")
    max_polylines: int = Field(64, ge=1, description="Sparse road tokens per scene")
    max_points: int = Field(32, ge=2, description="Points per resampled polyline")

    @field_validator("raster_size")
    def validate_size(cls, v):
        if v % 16:
            raise ValueError("raster_size must be a multiple of 16 (three strided convolutions)")
        return v

    @property
    def extent(self) -> float:
        return self.raster_resolution * self.raster_size


class SupervisionSettings(BaseModel):
    match_tol: float = Field(2.0, gt=0, description="Impact matching tolerance (m)")
    kappa_tol: float = Field(1e-3, gt=0, description="Curvature gap tolerance at joins (1/m)")
    edr_min_coverage: float = Field(0.6, ge=0, le=1)
    edr_min_observations: int = Field(3, ge=1)
    samples_per_segment: int = Field(64, ge=4, description="Arc-length table density")


class EncoderSettings(BaseModel):
    d_model: int = Field(64, ge=4)
    heads: int = Field(4, ge=1)
    text_buckets: int = Field(64, ge=8)
    hash_seed: int = Field(20240611, ge=0)
    conv_channels: List[int] = Field(default_factory=lambda: [8, 16])

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ValueError("conv_channels needs two positive widths")
        return self


class DecoderSettings(BaseModel):
    lambda_dir: float = Field(5.0, gt=0)
    top_m: int = Field(3, ge=1, le=16)
    control_points: int = Field(6, ge=3, le=26)
    lambda_tau: float = Field(8.0, gt=0, description="Pair fusion gate sharpness (1/s)")
    lambda_a: float = Field(8.0, gt=0, description="Accident anchor gate sharpness (1/s)")
    interaction_radius: float = Field(30.0, gt=0)
    gt_layers: int = Field(2, ge=1)
    gt_heads: int = Field(4, ge=1)
    pair_layers: int = Field(1, ge=1)
    start_scale: float = Field(10.0, gt=0, description="Start residual scale (m)")
    control_scale: float = Field(5.0, gt=0, description="Control-point offset scale (m)")
    step_scale: float = Field(0.5, gt=0, description="Dense increment residual scale (m)")
    anchor_min_step: float = Field(0.3, gt=0)
    default_speed: float = Field(13.4, gt=0, description="Anchor pacing when no prior is known (m/s)")
    use_lane_candidates: bool = True
    use_pair_refinement: bool = True
    anchor_vehicles: Literal["all", "pair"] = Field("all", description="Vehicles whose terminal mean is pulled onto the accident location")


class TimingSettings(BaseModel):
    dt: float = Field(0.1, description="Fixed step (s)")
    delta_step_bound: float = Field(math.log(3.0), gt=0)
    delta_lim: float = Field(5.0, ge=0, description="Speed cap margin over the prior (m/s)")
    jerk_bound: float = Field(10.0, gt=0, description="m/s^3")
    cap_sharpness: float = Field(10.0, gt=0, description="Soft speed cap sharpness (1/m)")
    jerk_softness: float = Field(4.0, gt=0, description="Soft clamp sharpness relative to the bound")
    post_transition_jerk_scale: float = Field(2.0, ge=1)
    transition_sharpness: float = Field(8.0, gt=0, description="Sharpness of the post-transition jerk relaxation (1/s)")
    enabled: bool = True

    @field_validator("dt")
    def validate_dt(cls, v):
        if abs(v - 0.1) > 1e-12:
            raise ValueError("dt is fixed to 0.1 s")
        return 0.1


class ObjectiveSettings(BaseModel):
    theta0_deg: float = Field(30.0, gt=0, lt=180)
    delta_lim: float = Field(5.0, ge=0)
    stationary_eps: float = Field(0.05, ge=0)
    smooth_l1_beta: float = Field(1.0, gt=0)
    contact_threshold: float = Field(4.572, gt=0, description="Collision-loss contact distance (m), raised per case to the reported distance")
    speed_policy: Literal["edr_only", "all"] = "edr_only"
    weights: Dict[str, float] = Field(default_factory=lambda: {name: 1.0 for name in LOSS_NAMES})

    @field_validator("weights")
    def validate_weights(cls, v):
        unknown = sorted(set(v) - set(LOSS_NAMES))
        if unknown:
            raise ValueError(f"unknown loss terms: {unknown}")
        return {name: float(v.get(name, 1.0)) for name in LOSS_NAMES}


class StageSettings(BaseModel):
    stage: int = Field(..., ge=1, le=3)
    epochs: int = Field(..., ge=0)
    frozen_groups: List[str] = Field(default_factory=list)
    teacher_forcing: float = Field(0.0, ge=0, le=1)
    pair_branch: bool = True

    @field_validator("frozen_groups")
    def validate_groups(cls, v):
        unknown = [g for g in v if g not in PARAM_GROUPS]
        if unknown:
            raise ValueError(f"unknown parameter groups: {unknown}")
        return sorted(set(v))


def _default_stages() -> List[StageSettings]:
    return [
        StageSettings(stage=1, epochs=20, frozen_groups=["encoder", "pair"], teacher_forcing=1.0, pair_branch=False),
        StageSettings(stage=2, epochs=20, frozen_groups=["encoder"], teacher_forcing=0.5, pair_branch=True),
        StageSettings(stage=3, epochs=40, frozen_groups=[], teacher_forcing=0.0, pair_branch=True),
    ]


class StageSchedule(BaseModel):
    """Three-stage training schedule with warmup and teacher forcing"""
    stages: List[StageSettings] = Field(default_factory=_default_stages)
    lr_heads: float = Field(1e-3, gt=0)
    lr_encoder: float = Field(2e-4, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    clip_norm: float = Field(1.0, gt=0)
    batch_size: int = Field(8, ge=1)
    warmup_steps: int = Field(200, ge=0, description="Steps for ramped losses to reach weight 1")
    ramped_losses: List[str] = Field(default_factory=lambda: ["pair", "coll", "beh", "limit", "smooth"])
    eval_every: int = Field(1, ge=1)
    max_skip_fraction: float = Field(0.5, gt=0, le=1)
    stagewise: bool = True

    @model_validator(mode="after")
    def check_contract(self):
        if self.stagewise:
            if [s.stage for s in self.stages] != [1, 2, 3]:
                raise ValueError("stage-wise schedules need stages 1, 2, 3 in order")
            required = {1: {"encoder", "pair"}, 2: {"encoder"}, 3: set()}
            for s in self.stages:
                if set(s.frozen_groups) != required[s.stage]:
                    raise ValueError(f"stage {s.stage} must freeze exactly {sorted(required[s.stage])}")
        ratios = [s.teacher_forcing for s in self.stages]
        if any(b > a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("teacher_forcing must be non-increasing across stages")
        return self

    def lr_for(self, group: str) -> float:
        return self.lr_encoder if group == "encoder" else self.lr_heads


class MetricsSettings(BaseModel):
    contact_threshold_ft: float = Field(15.0, gt=0)
    conservative_circle_ft: float = Field(16.2, gt=0)
    conservative_circle: bool = False
    noise: float = Field(0.0, ge=0, description="Accident-site noise cap (m)")
    drop: float = Field(0.0, ge=0, le=1, description="Random entry-missing rate")
    map_keep: float = Field(1.0, gt=0, le=1)
    sweep_rates: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.10, 0.20, 0.30, 0.50])


class SynthSettings(BaseModel):
    n: int = Field(200, ge=1)
    test_fraction: float = Field(0.2, ge=0, lt=1)
    families: List[ScenarioFamily] = Field(default_factory=lambda: list(ScenarioFamily))
    third_vehicle_prob: float = Field(0.3, ge=0, le=1)
    degradation: DegradationProfile = Field(default_factory=DegradationProfile)


class RenderSettings(BaseModel):
    width_in: float = Field(8.0, gt=0)
    height_in: float = Field(8.0, gt=0)
    colors: Dict[str, str] = Field(default_factory=lambda: {
        "edge": "#1F2937",
        "marking": "#F59E0B",
        "centerline": "#9CA3AF",
        "curb": "#6B7280",
        "other": "#D1D5DB",
        "lane_polygon": "#F3F4F6",
        "accident": "#EF4444",
        "vehicles": "#2563EB,#10B981,#4F46E5,#0EA5E9,#F472B6",
    })


class Settings(BaseSettings):
    seed: int = Field(1, ge=0)
    workers: int = Field(0, ge=0, description="0 means all available cores")
    geometry: GeometrySettings = Field(default_factory=GeometrySettings)
    supervision: SupervisionSettings = Field(default_factory=SupervisionSettings)
    encoder: EncoderSettings = Field(default_factory=EncoderSettings)
    decoder: DecoderSettings = Field(default_factory=DecoderSettings)
    timing: TimingSettings = Field(default_factory=TimingSettings)
    objectives: ObjectiveSettings = Field(default_factory=ObjectiveSettings)
    schedule: StageSchedule = Field(default_factory=StageSchedule)
    metrics: MetricsSettings = Field(default_factory=MetricsSettings)
    synth: SynthSettings = Field(default_factory=SynthSettings)
    render: RenderSettings = Field(default_factory=RenderSettings)

    model_config = SettingsConfigDict(
        env_prefix="CRASH_RECON_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


# Named presets, merged underneath the TOML file and CLI overrides
PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "tiny": {
        "geometry": {"raster_size": 64},
        "encoder": {"d_model": 16, "heads": 2, "text_buckets": 32, "conv_channels": [4, 8]},
        "decoder": {"gt_layers": 1, "gt_heads": 2},
        "schedule": {
            "batch_size": 4,
            "warmup_steps": 2,
            "stages": [
                {"stage": 1, "epochs": 1, "frozen_groups": ["encoder", "pair"], "teacher_forcing": 1.0, "pair_branch": False},
                {"stage": 2, "epochs": 1, "frozen_groups": ["encoder"], "teacher_forcing": 0.5, "pair_branch": True},
                {"stage": 3, "epochs": 1, "frozen_groups": [], "teacher_forcing": 0.0, "pair_branch": True},
            ],
        },
        "synth": {"n": 8},
    },
}


def deep_merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``updates`` into a copy of ``base``"""
    merged = deepcopy(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = deepcopy(value)
    return merged


def load_settings(
    config_path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Settings:
    """Resolve settings from preset, TOML file and explicit overrides"""
    data: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
        data = deep_merge(data, PRESETS[preset])
    if config_path:
        with open(config_path, "rb") as f:
            data = deep_merge(data, tomllib.load(f))
    if overrides:
        data = deep_merge(data, overrides)
    return Settings(**data)


@lru_cache
def get_settings() -> Settings:
    """Default settings (environment + defaults only)"""
    return Settings()
