import math

import numpy as np
import pytest

from crash_recon.core.config import MetricsSettings
from crash_recon.core.errors import MissingKeypointsError, ReferenceDirectionError
from crash_recon.schemas.case import K, ImpactSide, time_grid
from crash_recon.schemas.geometry import Polyline, PolylineCategory
from crash_recon.schemas.metrics import CaseMetrics
from crash_recon.schemas.training import ReconstructionDiagnostics
from crash_recon.services.metrics import (
    aapd,
    acceleration_error,
    aggregate,
    akd,
    avd,
    contact_sides,
    contact_threshold,
    curvature_error,
    detect_collision,
    discrete_curvature,
    evaluate_case,
    reference_direction,
    truth_arrays,
)
from crash_recon.services.reconstruct import Reconstruction


def line(start, end):
    return np.linspace(start, end, K)


def test_contact_threshold_takes_the_larger_distance():
    settings = MetricsSettings()
    assert contact_threshold(None, settings) == pytest.approx(4.572)
    assert contact_threshold(4.0, settings) == pytest.approx(4.572)
    assert contact_threshold(5.0, settings) == pytest.approx(5.0)
    assert contact_threshold(5.0, settings, conservative=True) == pytest.approx(16.2 * 0.3048)


@pytest.mark.parametrize("gap, standard, conservative", [
    (4.5, True, True),
    (4.9, False, True),
    (5.0, False, False),
])
def test_collision_detection_thresholds(gap, standard, conservative):
    settings = MetricsSettings()
    p_i = line([-40.0, 0.0], [0.0, 0.0])
    p_j = p_i + [gap, 0.0]
    assert detect_collision(p_i, p_j, contact_threshold(None, settings)).detected == standard
    assert detect_collision(p_i, p_j, contact_threshold(None, settings, conservative=True)).detected == conservative


def test_contact_point_is_midpoint_at_closest_step():
    p_i = line([-20.0, 0.0], [0.0, 0.0])
    p_j = line([20.0, 0.0], [2.0, 0.0])
    hit = detect_collision(p_i, p_j, 4.572)
    assert hit.step == K - 1
    assert hit.min_distance == pytest.approx(2.0)
    np.testing.assert_allclose(hit.contact_point, [1.0, 0.0])


def test_akd_averages_over_keypoints():
    gt = np.zeros((2, K, 2))
    rec = gt.copy()
    rec[0, :, 0] = 1.0
    rec[1, :, 1] = 3.0
    assert akd(rec, gt, [[0, 10], [50]]) == pytest.approx((1.0 + 1.0 + 3.0) / 3)
    with pytest.raises(MissingKeypointsError):
        akd(rec, gt, [[], []])


def test_avd_reads_speeds_at_edr_timestamps():
    speeds = np.tile(10.0 - time_grid(), (5, 1))
    value, count = avd(speeds, [[(-1.0, 12.0), (0.0, 10.0)], None, [], None, None])
    assert count == 2
    assert value == pytest.approx(0.5)
    assert avd(speeds, [None] * 5) == (None, 0)


def test_reference_direction_prefers_motion_then_lane():
    moving = line([0.0, 0.0], [0.0, 5.0])
    np.testing.assert_allclose(reference_direction(moving), [0.0, 1.0])
    lane = Polyline(id="l", category=PolylineCategory.CENTERLINE, points=[(0.0, 0.0), (-10.0, 0.0)])
    parked = np.ones((K, 2))
    np.testing.assert_allclose(reference_direction(parked, [lane], np.array([-5.0, 1.0])), [-1.0, 0.0])
    with pytest.raises(ReferenceDirectionError):
        reference_direction(parked)


def test_aapd_splits_error_along_direction():
    assert aapd((3.0, -4.0), (0.0, 0.0), (2.0, 0.0)) == pytest.approx((3.0, 4.0))
    assert aapd((1.0, 1.0), (0.0, 0.0), (1.0, 1.0)) == pytest.approx((np.sqrt(2.0), 0.0))


def test_contact_sides_for_rear_end_and_head_on():
    follower = line([-50.0, 0.0], [-3.0, 0.0])
    leader = line([-20.0, 0.0], [0.0, 0.0])
    assert contact_sides(follower, leader, K - 1) == (ImpactSide.FRONT, ImpactSide.REAR)
    oncoming = line([40.0, 0.0], [1.0, 0.0])
    assert contact_sides(line([-40.0, 0.0], [-1.0, 0.0]), oncoming, K - 1) == (ImpactSide.FRONT, ImpactSide.FRONT)
    parked = np.zeros((K, 2))
    assert contact_sides(parked, oncoming, K - 1)[0] is None


def test_acceleration_error():
    t = time_grid()
    assert acceleration_error(10.0 + t, np.full(K, 10.0)) == pytest.approx(1.0)


def test_discrete_curvature_of_a_circle():
    theta = np.linspace(0.0, 0.05 * (K - 1), K)
    circle = 10.0 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    curv, mask = discrete_curvature(circle)
    assert mask.all()
    np.testing.assert_allclose(curv, 0.1, rtol=1e-3)
    assert curvature_error(circle, circle) == 0.0
    assert curvature_error(np.zeros((K, 2)), circle) is None


def truth_reconstruction(scene):
    positions, speeds, valid = truth_arrays(scene.truth)
    diagnostics = ReconstructionDiagnostics(case_id=scene.case.case_id, vehicles=[])
    return Reconstruction(scene.case.case_id, positions, speeds, valid, diagnostics)


def test_truth_scores_perfectly(rear_end_scene):
    metrics = evaluate_case(truth_reconstruction(rear_end_scene), rear_end_scene.case, rear_end_scene.truth,
                            MetricsSettings())
    assert metrics.akd == pytest.approx(0.0)
    assert metrics.akd_all == pytest.approx(0.0)
    assert metrics.avd == pytest.approx(0.0, abs=1e-6)
    assert metrics.avd_count == 2 * K
    assert metrics.collision
    assert metrics.aapd_tan == pytest.approx(0.0, abs=1e-9)
    assert metrics.aapd_norm == pytest.approx(0.0, abs=1e-9)
    assert metrics.csa_status == "scored"
    assert metrics.csa_match
    assert metrics.acc_error == pytest.approx(0.0)


def test_unknown_side_excludes_csa(rear_end_scene):
    sides = list(rear_end_scene.case.annotations.impact_sides)
    sides[1] = ImpactSide.UNKNOWN
    case = rear_end_scene.case.model_copy(update={
        "annotations": rear_end_scene.case.annotations.model_copy(update={"impact_sides": sides}),
    })
    metrics = evaluate_case(truth_reconstruction(rear_end_scene), case, rear_end_scene.truth, MetricsSettings())
    assert metrics.csa_status == "unknown_side"
    assert metrics.csa_match is None


def test_aggregate_excludes_undefined_cases():
    cases = [
        CaseMetrics(case_id="a", akd=1.0, avd=2.0, collision=True, csa_match=True, per_vehicle_akd=[1.0, 3.0]),
        CaseMetrics(case_id="b", akd=3.0, collision=False, csa_match=False, csa_status="no_collision"),
        CaseMetrics(case_id="c", akd=2.0, csa_status="no_pair"),
    ]
    report = aggregate(cases, label="unit")
    assert report.n_cases == 3
    assert report.akd == pytest.approx(2.0)
    assert report.avd == pytest.approx(2.0)
    assert report.avd_excluded == 2
    assert report.cr == pytest.approx(50.0)
    assert report.csa == pytest.approx(50.0)
    assert report.csa_excluded == 1
    assert report.csa_no_collision == 1
    assert report.akd_variance == pytest.approx(1.0)
    assert report.csv_row()["label"] == "unit"


# Brute-force references written without numpy vector operations

def reference_akd(rec, gt, keypoints):
    total, count = 0.0, 0
    for n, steps in enumerate(keypoints):
        for k in steps:
            total += math.hypot(rec[n][k][0] - gt[n][k][0], rec[n][k][1] - gt[n][k][1])
            count += 1
    return total / count


def reference_speed(speeds, t):
    grid = [float(g) for g in time_grid()]
    if t <= grid[0]:
        return speeds[0]
    for k in range(K - 1):
        if grid[k] <= t <= grid[k + 1]:
            w = (t - grid[k]) / (grid[k + 1] - grid[k])
            return speeds[k] * (1.0 - w) + speeds[k + 1] * w
    return speeds[-1]


def reference_avd(speeds, edr):
    errors = [abs(reference_speed(speeds[slot], t) - v) for slot, samples in enumerate(edr) for t, v in samples]
    return sum(errors) / len(errors)


def reference_aapd(c_rec, c_gt, direction):
    length = math.hypot(direction[0], direction[1])
    ux, uy = direction[0] / length, direction[1] / length
    dx, dy = c_rec[0] - c_gt[0], c_rec[1] - c_gt[1]
    return abs(dx * ux + dy * uy), abs(-dx * uy + dy * ux)


def reference_collision(p_i, p_j, threshold):
    best, step = math.inf, -1
    for k in range(K):
        d = math.hypot(p_i[k][0] - p_j[k][0], p_i[k][1] - p_j[k][1])
        if d < best:
            best, step = d, k
    mid = ((p_i[step][0] + p_j[step][0]) / 2.0, (p_i[step][1] + p_j[step][1]) / 2.0)
    return best <= threshold, best, step, mid


def reference_side(own, other, k):
    heading = None
    for n in range(max(k, 1), 0, -1):
        hx, hy = own[n][0] - own[n - 1][0], own[n][1] - own[n - 1][1]
        if math.hypot(hx, hy) > 1e-9:
            heading = (hx, hy)
            break
    if heading is None:
        return None
    rx, ry = other[k][0] - own[k][0], other[k][1] - own[k][1]
    forward = rx * heading[0] + ry * heading[1]
    rightward = rx * heading[1] - ry * heading[0]
    bearing = math.degrees(math.atan2(rightward, forward))
    if -45.0 <= bearing < 45.0:
        return ImpactSide.FRONT
    if 45.0 <= bearing < 135.0:
        return ImpactSide.RIGHT
    if -135.0 <= bearing < -45.0:
        return ImpactSide.LEFT
    return ImpactSide.REAR


def random_scene(rng):
    n = int(rng.integers(2, 6))
    steps = rng.normal(0.0, 1.0, size=(n, K, 2)) + rng.normal(0.0, 1.5, size=(n, 1, 2))
    steps[rng.random((n, K)) < 0.1] = 0.0
    rec = rng.normal(0.0, 20.0, size=(n, 1, 2)) + np.cumsum(steps, axis=1)
    gt = rec + rng.normal(0.0, 2.0, size=rec.shape)
    keypoints = [sorted(rng.choice(K, size=int(rng.integers(1, 8)), replace=False).tolist()) for _ in range(n)]
    speeds = rng.uniform(0.0, 30.0, size=(n, K))
    edr = [[(float(t), float(rng.uniform(0.0, 30.0))) for t in np.round(rng.uniform(-5.0, 0.0, size=4), 2)]
           for _ in range(n)]
    return rec, gt, keypoints, speeds, edr


def test_metrics_match_brute_force_references():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        rec, gt, keypoints, speeds, edr = random_scene(rng)
        assert akd(rec, gt, keypoints) == pytest.approx(reference_akd(rec, gt, keypoints), rel=1e-12, abs=1e-12)
        value, count = avd(speeds, edr)
        assert count == sum(len(s) for s in edr)
        assert value == pytest.approx(reference_avd(speeds, edr), rel=1e-12, abs=1e-12)

        threshold = float(rng.uniform(3.0, 8.0))
        hit = detect_collision(rec[0], rec[1], threshold)
        detected, distance, step, mid = reference_collision(rec[0], rec[1], threshold)
        assert (hit.detected, hit.step) == (detected, step)
        assert hit.min_distance == pytest.approx(distance, rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(hit.contact_point, mid, rtol=1e-12, atol=1e-12)
        assert contact_sides(rec[0], rec[1], step) == (reference_side(rec[0], rec[1], step),
                                                        reference_side(rec[1], rec[0], step))

        c_gt, direction = gt[0, -1], rng.normal(size=2)
        tan, norm = aapd(hit.contact_point, c_gt, direction)
        ref_tan, ref_norm = reference_aapd(hit.contact_point, c_gt, direction)
        assert tan == pytest.approx(ref_tan, rel=1e-12, abs=1e-12)
        assert norm == pytest.approx(ref_norm, rel=1e-12, abs=1e-12)
        err = np.asarray(hit.contact_point) - c_gt
        assert tan ** 2 + norm ** 2 == pytest.approx(float(err @ err), rel=1e-9, abs=1e-9)
