import math

import numpy as np
import pytest

from crash_recon.core.config import SupervisionSettings
from crash_recon.core.errors import CurveFitError, EdrUnavailableError, UnsupervisedSpeedError
from crash_recon.schemas.case import K, VehicleSemantics, time_grid
from crash_recon.schemas.synth import ScenarioFamily
from crash_recon.services.ingest import ingest_case
from crash_recon.services.supervision import (
    SpeedProfile,
    SpeedSource,
    backward_distance,
    backward_trace,
    build_supervision,
    fit_g2,
    interpolate_edr,
    supervision_frame,
    supervision_from_frame,
    transition_time,
    truncate_at_impact,
    weak_speed_prior,
)


def test_edr_interpolation_on_grid():
    profile = interpolate_edr([(-4.0, 20.0), (0.0, 12.0), (-2.0, 16.0)])
    t = time_grid()
    assert profile.strong
    assert profile.coverage == pytest.approx(0.8)
    assert not profile.valid_mask[t < -4.0 - 1e-9].any()
    assert profile.valid_mask[t >= -4.0 - 1e-9].all()
    assert profile.samples[np.argmin(np.abs(t + 3.0))] == pytest.approx(18.0)
    assert np.isfinite(profile.samples).all()


def test_sparse_edr_is_weak():
    profile = interpolate_edr([(-1.0, 10.0), (0.0, 9.0)])
    assert not profile.strong
    single = interpolate_edr([(-0.5, 7.0)])
    assert single.valid_mask.sum() == 1
    assert single.valid_mask[45]
    with pytest.raises(EdrUnavailableError):
        interpolate_edr([])


def test_speed_prior_needs_a_limit():
    profile = weak_speed_prior(VehicleSemantics(slot_index=0, valid=True, speed_limit=13.4))
    assert profile.source == SpeedSource.SPEED_LIMIT_PRIOR
    assert not profile.strong
    np.testing.assert_array_equal(profile.samples, 13.4)
    with pytest.raises(UnsupervisedSpeedError):
        weak_speed_prior(VehicleSemantics(slot_index=0, valid=True))


def test_truncation_keeps_last_match():
    points = [(-20.0, 0.0, None), (-1.0, 0.0, None), (0.5, 0.0, None), (6.0, 0.0, None)]
    cut = truncate_at_impact(points, (0.0, 0.0), match_tol=2.0)
    assert not cut.fallback
    assert cut.end_index == 2
    assert cut.points == points[:3]


def test_truncation_falls_back_to_last_observation():
    points = [(-20.0, 0.0, None), (-10.0, 0.0, None)]
    cut = truncate_at_impact(points, (50.0, 0.0), match_tol=2.0)
    assert cut.fallback
    assert cut.points == points
    assert truncate_at_impact(points, None, 2.0).fallback


def test_reference_curve_interpolates_with_continuous_curvature():
    pts = [(0.0, 0.0), (10.0, 2.0), (20.0, 8.0), (28.0, 18.0), (32.0, 30.0)]
    curve = fit_g2(pts)
    knots_xy = curve.spline(curve.knots)
    np.testing.assert_allclose(knots_xy, pts, atol=1e-9)
    pos, head, curv = curve.join_gaps()
    assert pos.max() < 1e-9
    assert head.max() < 1e-9
    assert curv.max() < SupervisionSettings().kappa_tol


def test_reference_curve_honours_end_headings():
    curve = fit_g2([(0.0, 0.0, math.pi / 2), (10.0, 10.0, 0.0)])
    np.testing.assert_allclose(curve.tangent("start"), [0.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(curve.tangent("end"), [1.0, 0.0], atol=1e-9)


def test_reference_curve_extends_along_end_tangents():
    curve = fit_g2([(0.0, 0.0), (5.0, 0.0), (10.0, 0.0)])
    assert curve.length == pytest.approx(10.0)
    np.testing.assert_allclose(curve.point_at([-3.0, 5.0, 12.0]), [[-3.0, 0.0], [5.0, 0.0], [12.0, 0.0]], atol=1e-9)


def test_coincident_points_cannot_be_fitted():
    with pytest.raises(CurveFitError):
        fit_g2([(1.0, 1.0), (1.0, 1.0)])


def assert_g2(curve, points, kappa_tol):
    np.testing.assert_allclose(curve.spline(curve.knots), np.asarray(points)[:, :2], atol=1e-6)
    pos, head, curv = curve.join_gaps()
    if len(pos):
        assert pos.max() < 1e-9
        assert head.max() < 1e-6
        assert curv.max() < kappa_tol


def test_reference_curve_is_g2_on_random_point_sets(rng):
    kappa_tol = SupervisionSettings().kappa_tol
    for _ in range(500):
        n = int(rng.integers(3, 13))
        heading = rng.uniform(-math.pi, math.pi) + np.cumsum(rng.uniform(-math.pi / 2, math.pi / 2, size=n - 1))
        steps = rng.uniform(2.0, 20.0, size=(n - 1, 1)) * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        xy = np.vstack([rng.uniform(-50.0, 50.0, size=(1, 2)), np.zeros((n - 1, 2))])
        xy[1:] = xy[0] + np.cumsum(steps, axis=0)
        if rng.random() < 0.5:
            ends = [float(heading[0] + rng.uniform(-0.3, 0.3)), float(heading[-1] + rng.uniform(-0.3, 0.3))]
            points = [(x, y, None) for x, y in xy]
            points[0], points[-1] = (*xy[0], ends[0]), (*xy[-1], ends[1])
        else:
            points = [(x, y) for x, y in xy]
        curve = fit_g2(points)
        assert_g2(curve, [p[:2] for p in points], kappa_tol)


def test_collinear_points_fit_a_straight_line(rng):
    direction = np.array([math.cos(0.7), math.sin(0.7)])
    offsets = np.concatenate([[0.0], np.cumsum(rng.uniform(1.0, 15.0, size=7))])
    points = [tuple(np.array([3.0, -4.0]) + d * direction) for d in offsets]
    curve = fit_g2(points)
    assert_g2(curve, points, SupervisionSettings().kappa_tol)
    s = np.linspace(0.0, curve.length, 200)
    assert curve.length == pytest.approx(offsets[-1], abs=1e-6)
    np.testing.assert_allclose(curve.curvature_at(s), 0.0, atol=1e-9)
    np.testing.assert_allclose(curve.heading_at(s), 0.7, atol=1e-9)


@pytest.mark.parametrize("headings", [False, True])
def test_points_on_a_circle_keep_its_curvature(headings):
    theta = np.radians(np.arange(0.0, 271.0, 10.0))
    xy = 20.0 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    points = [(x, y) for x, y in xy]
    if headings:
        points[0], points[-1] = (*xy[0], theta[0] + math.pi / 2), (*xy[-1], theta[-1] + math.pi / 2)
    curve = fit_g2(points)
    assert_g2(curve, xy, SupervisionSettings().kappa_tol)
    s = np.linspace(0.0, curve.length, 400)
    np.testing.assert_allclose(curve.curvature_at(s), 0.05, rtol=0.05)


def test_backward_distance_is_trapezoidal():
    ell = backward_distance(np.full(K, 10.0))
    assert ell[0] == pytest.approx(50.0)
    assert ell[-1] == 0.0
    assert np.all(np.diff(ell) < 0)


def test_backward_trace_places_steps_by_distance():
    curve = fit_g2([(0.0, 0.0), (30.0, 0.0), (60.0, 0.0)])
    profile = SpeedProfile(np.full(K, 10.0), np.ones(K, dtype=bool), SpeedSource.EDR)
    trace = backward_trace(curve, profile)
    np.testing.assert_allclose(trace.xy[:, 0], 60.0 + 10.0 * time_grid(), atol=1e-6)
    np.testing.assert_allclose(trace.xy[:, 1], 0.0, atol=1e-9)
    assert not trace.weak.any()


def test_short_curve_marks_extrapolated_steps_weak():
    curve = fit_g2([(0.0, 0.0), (10.0, 0.0)])
    trace = backward_trace(curve, SpeedProfile(np.full(K, 10.0), np.ones(K, dtype=bool), SpeedSource.EDR))
    assert trace.weak[0]
    assert not trace.weak[-1]
    assert trace.xy[0, 0] == pytest.approx(-40.0)


def test_transition_time_finds_braking_onset():
    t = time_grid()
    speeds = np.where(t < -2.0, 20.0, 20.0 - 4.0 * (t + 2.0))
    assert transition_time(np.zeros(K), speeds) == pytest.approx(-2.0)
    assert math.isnan(transition_time(np.zeros(K), np.full(K, 5.0)))


def test_build_supervision_from_report(doc_case):
    sup = build_supervision(doc_case)
    assert list(np.flatnonzero(sup.vehicle_valid)) == [0, 1]
    assert not sup.fallback[:2].any()
    assert sup.speed_strong[0] and not sup.speed_strong[1]
    assert sup.speed_prior[1] == pytest.approx(15.6)
    np.testing.assert_allclose(sup.xy[0, -1], [0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(sup.xy[1, -1], [3.0, 0.0], atol=1e-9)
    assert sup.speed_loss_mask("edr_only")[1].sum() == 0
    assert sup.speed_loss_mask("all")[1].sum() == K
    np.testing.assert_array_equal(sup.position_mask()[2:], False)


def test_build_supervision_warns_on_missing_impact_match(case_doc, caplog):
    case_doc["annotations"]["accident_location"] = [90.0, 40.0]
    sup = build_supervision(ingest_case(case_doc))
    assert sup.fallback[0] and sup.fallback[1]
    assert "last observation used as endpoint" in caplog.text


def test_supervision_table_round_trips(doc_case):
    sup = build_supervision(doc_case)
    frame = supervision_frame(sup)
    assert len(frame) == 2 * K
    back = supervision_from_frame(doc_case.case_id, frame)
    np.testing.assert_allclose(back.xy, sup.xy)
    np.testing.assert_array_equal(back.speed_strong, sup.speed_strong)
    np.testing.assert_array_equal(back.step_weak, sup.step_weak)


@pytest.mark.parametrize("family", list(ScenarioFamily))
def test_full_evidence_supervision_recovers_truth(scene_factory, family):
    scene = scene_factory(family)
    sup = scene.supervision()
    truth = scene.truth
    for slot in scene.case.valid_slots():
        xy = np.asarray(truth.positions[slot])
        assert np.linalg.norm(sup.xy[slot] - xy, axis=1).max() < 0.1
        assert np.abs(sup.v[slot] - np.asarray(truth.speeds[slot])).max() < 0.2
