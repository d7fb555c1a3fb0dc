import numpy as np
import pytest

from crash_recon.core.config import load_settings
from crash_recon.schemas.synth import DegradationProfile, ScenarioFamily, ScenarioSpec
from crash_recon.services.ingest import ingest_case
from crash_recon.services.synth import degrade, generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_settings():
    return load_settings(preset="tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def rear_end_scene():
    spec = ScenarioSpec(family=ScenarioFamily.REAR_END_STRAIGHT, seed=3, speeds=(20.0, 10.0), initial_gap=45.0)
    return generate(spec, "rear-end-3")


@pytest.fixture
def scene_factory():
    """One feasible scene per family with fixed parameters"""
    specs = {
        ScenarioFamily.REAR_END_STRAIGHT: dict(speeds=(18.0, 9.0)),
        ScenarioFamily.LEFT_TURN_ACROSS_PATH: dict(speeds=(6.0, 14.0)),
        ScenarioFamily.LANE_CHANGE_SIDESWIPE: dict(speeds=(16.0, 14.0)),
        ScenarioFamily.HEAD_ON_CURVE: dict(speeds=(12.0, 12.0), curve_radius=60.0),
    }

    def make(family: ScenarioFamily, seed: int = 1, **kwargs):
        params = {**specs[family], **kwargs}
        return generate(ScenarioSpec(family=family, seed=seed, **params), f"{family.value}-{seed}")

    return make


@pytest.fixture
def degraded_case(rear_end_scene):
    case, _ = degrade(rear_end_scene, DegradationProfile.zero(), np.random.default_rng(0))
    return case


def _case_doc():
    return {
        "case_id": "doc-1",
        "units": {"length": "m", "speed": "m/s"},
        "scene": {
            "summary": "V1 struck the rear of V2 in the eastbound lane.",
            "crash_time": "17:45",
            "lighting": "daylight",
            "weather": "clear",
            "road_condition": "dry",
            "locality": "urban",
        },
        "geometry": {
            "frame": "north_up",
            "curves": [
                {"id": "edge-s", "category": "edge", "points": [[-100.0, -1.8], [100.0, -1.8]]},
                {"id": "edge-n", "category": "edge", "points": [[-100.0, 5.4], [100.0, 5.4]]},
                {"id": "marking-1", "category": "marking", "points": [[-100.0, 1.8], [100.0, 1.8]]},
            ],
            "lane_centerlines": [
                {"id": "lane-0", "points": [[-100.0, 0.0], [0.0, 0.0], [100.0, 0.0]]},
                {"id": "lane-1", "points": [[-100.0, 3.6], [100.0, 3.6]]},
            ],
        },
        "vehicles": [
            {
                "slot": 0,
                "category": "passenger",
                "pre_movement": "straight",
                "avoidance": "braking",
                "impact_side": "front",
                "initial_lane": "lane-0",
                "travel_direction": "eastbound",
                "speed_limit": "35 mph",
                "trajectory": [[-60.0, 0.0], [-30.0, 0.0], [-10.0, 0.0], [0.0, 0.0]],
                "edr": [[-5.0, 20.0], [-4.0, 20.0], [-3.0, 19.0], [-2.0, 17.0], [-1.0, 15.0], [0.0, 14.0]],
            },
            {
                "slot": 1,
                "category": "SUV",
                "pre_movement": "straight",
                "avoidance": "none",
                "impact_side": "rear",
                "initial_lane": "lane-0",
                "travel_direction": [1.0, 0.0],
                "speed_limit": 15.6,
                "trajectory": [[-40.0, 0.0], [-20.0, 0.0], [3.0, 0.0]],
            },
        ],
        "annotations": {"accident_location": [1.5, 0.0], "collision_pair": [0, 1]},
    }


@pytest.fixture
def case_doc():
    """A small two-vehicle rear-end report document; a fresh copy per test"""
    return _case_doc()


@pytest.fixture
def doc_case(case_doc):
    return ingest_case(case_doc)
