import math

import numpy as np
import pytest

from crash_recon.core.errors import GeometryValidationError
from crash_recon.schemas.case import ImpactSide
from crash_recon.schemas.geometry import CATEGORY_ORDER, AngleSource, GeometryFrame, Polyline, PolylineCategory
from crash_recon.services.geometry import (
    nearest_on_lane,
    point_at_arc,
    polyline_descriptor,
    polyline_tensor,
    rasterize,
    resample_polyline,
    rotation,
    scene_centroid,
    side_bucket,
    standardize_case,
    validate_rotation,
)
from crash_recon.services.ingest import ingest_case


def test_north_up_case_is_returned_unchanged(doc_case):
    assert standardize_case(doc_case) is doc_case


def test_raw_frame_applies_rigid_transform(case_doc):
    case_doc["geometry"]["frame"] = "raw"
    case_doc["geometry"]["transform"] = {"angle": math.pi / 2, "translation": [10.0, 0.0]}
    case_doc["vehicles"][0]["trajectory"][-1] = [0.0, 0.0, 0.0]
    case = standardize_case(ingest_case(case_doc))

    assert case.geometry.frame == GeometryFrame.NORTH_UP
    assert case.geometry.north_angle == 0.0
    lane = case.geometry.lane("lane-0").as_array()
    np.testing.assert_allclose(lane[[0, -1]], [[10.0, -100.0], [10.0, 100.0]], atol=1e-9)

    x, y, theta = case.raw_points[0][-1]
    assert (x, y) == pytest.approx((10.0, 0.0), abs=1e-9)
    assert theta == pytest.approx(math.pi / 2)
    assert case.raw_points[0][0][2] is None
    np.testing.assert_allclose(case.vehicles[0].travel_direction, [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(case.annotations.accident_location, [10.0, 1.5], atol=1e-9)


def test_north_arrow_wins_and_rotates_about_centroid(case_doc):
    case_doc["geometry"].update(frame="world", north_arrow=math.pi / 2, north_metadata=0.3)
    world = ingest_case(case_doc)
    case = standardize_case(world)

    assert case.geometry.north_source == AngleSource.NORTH_ARROW
    assert case.geometry.north_angle == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(scene_centroid(case.geometry), scene_centroid(world.geometry), atol=1e-9)
    # north points along -x, so the eastbound vehicle now heads south
    np.testing.assert_allclose(case.vehicles[0].travel_direction, [0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(rotation(-math.pi / 2) @ np.array([-1.0, 0.0]), [0.0, 1.0], atol=1e-12)


def test_missing_north_defaults_to_zero(case_doc):
    case_doc["geometry"]["frame"] = "world"
    case = standardize_case(ingest_case(case_doc))
    assert case.geometry.north_angle == 0.0
    assert case.geometry.north_source == AngleSource.DEFAULT_METADATA
    np.testing.assert_allclose(
        case.geometry.lane("lane-1").as_array(), ingest_case(case_doc).geometry.lane("lane-1").as_array(), atol=1e-9
    )


@pytest.mark.parametrize("matrix", [np.diag([1.0, -1.0]), 2.0 * np.eye(2), np.full((2, 2), np.nan)])
def test_invalid_rotations_are_rejected(matrix):
    with pytest.raises(GeometryValidationError):
        validate_rotation(matrix)


def test_proper_rotation_is_accepted():
    validate_rotation(rotation(0.3))


def test_rasterize_draws_into_category_channel(doc_case):
    raster = rasterize(doc_case.geometry, resolution=1.0, extent=20.0)
    channel = CATEGORY_ORDER.index(PolylineCategory.CENTERLINE)
    assert raster.grid.shape == (len(CATEGORY_ORDER), 20, 20)
    assert raster.cell_of((0.0, 0.0)) == (10, 10)
    assert raster.grid[channel, 10].all()
    assert not raster.empty


def test_rasterize_outside_extent_is_empty(doc_case):
    raster = rasterize(doc_case.geometry, resolution=1.0, extent=20.0, center=(500.0, 500.0))
    assert raster.empty
    assert not raster.grid.any()


def test_rasterize_requires_north_up(case_doc):
    case_doc["geometry"]["frame"] = "raw"
    geometry = ingest_case(case_doc).geometry
    with pytest.raises(GeometryValidationError):
        rasterize(geometry, 1.0, 20.0)


def test_point_at_arc_extends_past_both_ends():
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    out = point_at_arc(pts, [-2.0, 5.0, 15.0, 22.0])
    np.testing.assert_allclose(out, [[-2.0, 0.0], [5.0, 0.0], [10.0, 5.0], [10.0, 12.0]])


def test_nearest_on_lane_reports_arc_and_tangent():
    lane = Polyline(id="l", category=PolylineCategory.CENTERLINE, points=[(0, 0), (10, 0), (10, 10)])
    dist, arc, tangent = nearest_on_lane((12.0, 5.0), lane)
    assert dist == pytest.approx(2.0)
    assert arc == pytest.approx(15.0)
    np.testing.assert_allclose(tangent, [0.0, 1.0])


def test_polyline_descriptor():
    poly = Polyline(id="c", category=PolylineCategory.EDGE, points=[(0, 0), (4, 0), (10, 0)])
    desc = polyline_descriptor(poly, scene_extent=10.0)
    np.testing.assert_allclose(desc[:6], [5.0, 0.0, 0.0, 1.0 / math.sqrt(2.0), 10.0, 0.0], atol=1e-12)
    assert desc[6 + CATEGORY_ORDER.index(PolylineCategory.EDGE)] == 1.0
    assert desc[6:].sum() == 1.0


def test_resample_keeps_endpoints():
    pts = np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]])
    out = resample_polyline(pts, 8)
    np.testing.assert_allclose(out[[0, -1]], pts[[0, -1]])
    np.testing.assert_allclose(np.linalg.norm(np.diff(out, axis=0), axis=1), 1.0)


def test_polyline_tensor_truncates_to_capacity(doc_case):
    pts, mask, kept = polyline_tensor(doc_case.geometry, max_polylines=2, max_points=2)
    assert pts.shape == (2, 2, 2)
    assert [p.id for p in kept] == ["edge-s", "edge-n"]
    assert mask.all()


@pytest.mark.parametrize("offset, side", [
    ((1.0, 0.0), ImpactSide.FRONT),
    ((0.0, -1.0), ImpactSide.RIGHT),
    ((-1.0, 0.0), ImpactSide.REAR),
    ((0.0, 1.0), ImpactSide.LEFT),
    ((1.0, -0.9), ImpactSide.FRONT),
    ((1.0, -1.1), ImpactSide.RIGHT),
])
def test_side_bucket_eastbound(offset, side):
    assert side_bucket((1.0, 0.0), offset) == side


def test_side_bucket_follows_heading():
    assert side_bucket((0.0, 1.0), (1.0, 0.0)) == ImpactSide.RIGHT
    assert side_bucket((0.0, 1.0), (0.0, 5.0)) == ImpactSide.FRONT
