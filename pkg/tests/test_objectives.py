import numpy as np
import pytest

from crash_recon.core.config import LOSS_NAMES, ObjectiveSettings
from crash_recon.nn.autodiff import Tape, Tensor, parameter
from crash_recon.nn.gradcheck import max_relative_error
from crash_recon.schemas.case import DT, K, MAX_SLOTS, Avoidance, time_grid
from crash_recon.services.objectives import (
    LossInputs,
    behavior_loss,
    collision_loss,
    limit_loss,
    pair_loss,
    smoothness_loss,
    speed_loss,
    total_loss,
    trajectory_loss,
    warmup_weight,
)
from crash_recon.services.supervision import DenseSupervision

VALID = np.array([True, True, False, False, False])


def straight_supervision(speed=10.0):
    """Two vehicles driving east at ``speed`` on parallel tracks 4 m apart"""
    sup = DenseSupervision(case_id="s")
    t = time_grid()
    for slot, y in ((0, 0.0), (1, 4.0)):
        sup.xy[slot] = np.stack([speed * t, np.full(K, y)], axis=1)
        sup.v[slot] = speed
        sup.vehicle_valid[slot] = True
        sup.step_valid[slot] = True
        sup.speed_mask[slot] = True
        sup.speed_valid[slot] = True
    sup.speed_strong[0] = True
    return sup


def test_empty_sets_contribute_zero():
    sup = DenseSupervision(case_id="empty")
    p = Tensor(np.ones((MAX_SLOTS, K, 2)))
    for value, count in (trajectory_loss(p, sup), speed_loss(Tensor(np.ones((MAX_SLOTS, K))), sup),
                         pair_loss(p[0], (0, 1), sup), collision_loss(p, None, np.zeros(2), 4.572)):
        assert float(value.data) == 0.0
        assert count == 0


def test_trajectory_loss_is_smooth_l1_over_supervised_steps():
    sup = straight_supervision()
    p = sup.xy + 0.5
    p[2:] = 100.0
    loss, count = trajectory_loss(Tensor(p), sup)
    assert count == 2 * K
    assert float(loss.data) == pytest.approx(0.125)


def test_speed_loss_respects_policy():
    sup = straight_supervision()
    v = Tensor(sup.v + 2.0)
    loss, count = speed_loss(v, sup, "edr_only")
    assert count == K
    assert float(loss.data) == pytest.approx(2.0)
    assert speed_loss(v, sup, "all")[1] == 2 * K


def test_pair_loss_uses_relative_motion():
    sup = straight_supervision()
    r_hat = Tensor(np.tile([1.0, 4.0], (K, 1)))
    loss, count = pair_loss(r_hat, (0, 1), sup)
    assert count == K
    assert float(loss.data) == pytest.approx(1.0)


def test_collision_loss_zero_for_contact_at_accident():
    p = np.zeros((MAX_SLOTS, K, 2))
    p[0, :, 0] = np.linspace(-50.0, -1.0, K)
    p[1, :, 0] = np.linspace(50.0, 1.0, K)
    loss, count = collision_loss(Tensor(p), (0, 1), np.zeros(2), threshold=4.572)
    assert count == 1
    assert float(loss.data) == pytest.approx(0.0)
    far, _ = collision_loss(Tensor(p), (0, 1), np.array([0.0, 3.0]), threshold=4.572)
    assert float(far.data) == pytest.approx(2.5)


def test_behavior_loss_penalizes_speeding_up_while_braking():
    t = time_grid()
    rising = np.tile(10.0 + t, (MAX_SLOTS, 1))
    tau = Tensor(np.full(MAX_SLOTS, -2.0))
    braking = [Avoidance.BRAKING, Avoidance.UNKNOWN] + [Avoidance.UNKNOWN] * 3
    loss, count = behavior_loss(Tensor(rising), tau, VALID, braking)
    # slot 1 (unknown, constant acceleration) contributes a zero term
    assert count == 2
    assert float(loss.data) == pytest.approx(0.5)
    falling, _ = behavior_loss(Tensor(rising[:, ::-1].copy()), tau, VALID, braking)
    assert float(falling.data) == pytest.approx(0.0, abs=1e-9)
    steady, count = behavior_loss(Tensor(rising), tau, VALID, [Avoidance.NONE] * MAX_SLOTS)
    assert count == 2
    assert float(steady.data) == pytest.approx(0.0, abs=1e-9)


def test_behavior_loss_regularizes_unknown_labels():
    tau = Tensor(np.full(MAX_SLOTS, -2.0))
    only_first = np.array([True, False, False, False, False])
    unknown = [Avoidance.UNKNOWN] * MAX_SLOTS
    wavy = np.tile(10.0 + 3.0 * np.sin(np.arange(K)), (MAX_SLOTS, 1))
    loss, count = behavior_loss(Tensor(wavy), tau, only_first, unknown)
    assert count == 1
    assert float(loss.data) > 0.0
    constant_acc = np.tile(10.0 - 2.0 * time_grid(), (MAX_SLOTS, 1))
    flat, count = behavior_loss(Tensor(constant_acc), tau, only_first, unknown)
    assert count == 1
    assert float(flat.data) == pytest.approx(0.0, abs=1e-9)


def test_limit_loss_only_above_margin():
    v = np.full((MAX_SLOTS, K), 20.0)
    limits = np.array([13.0, np.nan, np.nan, np.nan, np.nan])
    loss, count = limit_loss(Tensor(v), limits, VALID, delta_lim=5.0)
    assert count == K
    assert float(loss.data) == pytest.approx(1.5)
    assert float(limit_loss(Tensor(v), limits, VALID, delta_lim=8.0)[0].data) == 0.0


def test_smoothness_flags_sharp_turns():
    p = np.zeros((MAX_SLOTS, K, 2))
    p[0, :26, 0] = np.arange(26.0)
    p[0, 26:, 0] = 25.0
    p[0, 26:, 1] = np.arange(1.0, 26.0)
    p[1, :, 0] = np.arange(K, dtype=float)
    loss, count = smoothness_loss(Tensor(p), VALID, theta0_deg=30.0, eps=0.05)
    assert count == 2 * (K - 2)
    assert float(loss.data) == pytest.approx(np.cos(np.radians(30.0)) / count)


def test_warmup_ramp():
    assert warmup_weight(0, 200) == 0.0
    assert warmup_weight(100, 200) == 0.5
    assert warmup_weight(500, 200) == 1.0
    assert warmup_weight(0, 0) == 1.0


def test_total_loss_ramps_auxiliary_terms():
    sup = straight_supervision()
    p = parameter(sup.xy + 0.5)
    inputs = LossInputs(p_hat=p, v_hat=Tensor(sup.v + 2.0), tau=Tensor(np.full(MAX_SLOTS, -1.5)), valid=VALID,
                        pair=(0, 1), accident=np.array([0.0, 2.0]),
                        avoidance=[Avoidance.BRAKING] * MAX_SLOTS, speed_limit=np.full(MAX_SLOTS, 5.0))
    with Tape() as tape:
        start = total_loss(inputs, sup, ObjectiveSettings(), step=0, warmup_steps=10)
    assert set(start.terms) == set(LOSS_NAMES)
    assert start.weights["traj"] == 1.0 and start.weights["spd"] == 1.0
    assert all(start.weights[n] == 0.0 for n in ("pair", "coll", "beh", "limit", "smooth"))
    assert float(start.total.data) == pytest.approx(0.125 + 2.0)
    tape.backward(start.total, [p])
    assert np.all(np.isfinite(p.grad))

    later = total_loss(inputs, sup, ObjectiveSettings(), step=10, warmup_steps=10)
    assert float(later.total.data) > float(start.total.data)
    assert later.weights["coll"] == 1.0


def test_collision_term_uses_reported_contact_distance():
    p = np.zeros((MAX_SLOTS, K, 2))
    p[0, :, 0] = np.linspace(-50.0, -3.0, K)
    p[1, :, 0] = np.linspace(50.0, 3.0, K)
    sup = DenseSupervision(case_id="gap")

    def coll(reported):
        inputs = LossInputs(p_hat=Tensor(p), v_hat=Tensor(np.zeros((MAX_SLOTS, K))), tau=Tensor(np.zeros(MAX_SLOTS)),
                            valid=VALID, pair=(0, 1), accident=np.zeros(2), reported_distance=reported)
        return float(total_loss(inputs, sup, ObjectiveSettings(), step=0, warmup_steps=0).terms["coll"].data)

    # 6 m apart at the closest step: outside 15 ft, inside a reported 7 m
    assert coll(None) == pytest.approx(6.0 - 4.572 - 0.5)
    assert coll(4.0) == pytest.approx(6.0 - 4.572 - 0.5)
    assert coll(7.0) == pytest.approx(0.0)


# ---- finite-difference gradients ------------------------------------------
# Inputs are drawn away from the kinks of relu, abs and argmin so that central
# differences see a single smooth piece.

GRAD_TOL = 1e-4
SEEDS = [s if s < 3 else pytest.param(s, marks=pytest.mark.slow) for s in range(100)]


def signed(rng, low, high, shape):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def random_supervision(rng):
    sup = DenseSupervision(case_id="grad")
    for slot in (0, 1):
        steps = rng.normal([1.2, 0.0], 0.3, size=(K, 2))
        sup.xy[slot] = rng.normal(0.0, 5.0, size=2) + np.cumsum(steps, axis=0)
        sup.v[slot] = rng.uniform(5.0, 20.0, size=K)
        sup.vehicle_valid[slot] = True
        sup.step_valid[slot] = rng.random(K) > 0.3
        sup.step_valid[slot, -1] = True
        sup.speed_mask[slot] = rng.random(K) > 0.2
        sup.speed_mask[slot, -1] = True
        sup.speed_valid[slot] = True
    return sup


@pytest.mark.parametrize("seed", SEEDS)
def test_trajectory_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    sup = random_supervision(rng)
    p = sup.xy + signed(rng, 0.1, 0.8, sup.xy.shape)

    def fn(p):
        return trajectory_loss(p, sup)[0]

    assert max_relative_error(fn, [p]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_speed_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    sup = random_supervision(rng)
    v = sup.v + signed(rng, 0.1, 1.5, sup.v.shape)

    def fn(v):
        return speed_loss(v, sup, "all")[0]

    assert max_relative_error(fn, [v]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_pair_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    sup = random_supervision(rng)
    r_hat = sup.xy[1] - sup.xy[0] + signed(rng, 0.1, 1.5, (K, 2))

    def fn(r):
        return pair_loss(r, (0, 1), sup)[0]

    assert max_relative_error(fn, [r_hat]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_collision_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    while True:
        p = rng.normal(0.0, 0.05, size=(MAX_SLOTS, K, 2))
        p[0, :, 0] += np.linspace(-30.0, -6.0, K)
        p[1, :, 0] += np.linspace(30.0, 6.0, K)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        mid = (p[0, -1] + p[1, -1]) / 2.0
        accident = mid + rng.uniform(2.0, 5.0) * np.array([np.cos(angle), np.sin(angle)])
        dist = np.sort(np.linalg.norm(p[0] - p[1], axis=1))
        if dist[1] - dist[0] > 1e-3:
            break

    def fn(p):
        return collision_loss(p, (0, 1), accident, threshold=4.572)[0]

    assert float(fn(Tensor(p)).data) > 0.0
    assert max_relative_error(fn, [p]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_behavior_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    t = time_grid()
    tau = Tensor(np.full(MAX_SLOTS, -2.5))
    post = t[1:] > -2.5
    valid = np.array([True, True, True, False, False])
    labels = [Avoidance.BRAKING, Avoidance.UNKNOWN, Avoidance.ACCELERATING, Avoidance.UNKNOWN, Avoidance.UNKNOWN]
    while True:
        v = 12.0 + rng.normal(0.0, 0.05, size=(MAX_SLOTS, K))
        v[0] += 2.0 * t
        v[1] += np.cumsum(rng.normal(0.0, 0.1, size=K))
        v[2] -= 2.0 * t
        acc = np.diff(v, axis=1) / DT
        means = acc[:, post].mean(axis=1)
        spread = np.abs(acc[1, post] - means[1])
        if abs(means[0]) > 1e-2 and abs(means[2]) > 1e-2 and spread.min() > 1e-2:
            break

    def fn(v):
        return behavior_loss(v, tau, valid, labels)[0]

    assert float(fn(Tensor(v)).data) > 0.0
    assert max_relative_error(fn, [v]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_limit_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    limits = np.array([13.0, 20.0, np.nan, np.nan, np.nan])
    cap = np.nan_to_num(limits)[:, None] + 5.0
    v = cap + signed(rng, 0.1, 0.8, (MAX_SLOTS, K))

    def fn(v):
        return limit_loss(v, limits, VALID, delta_lim=5.0)[0]

    assert max_relative_error(fn, [v]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_smoothness_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    threshold = np.cos(np.radians(30.0))
    while True:
        p = np.zeros((MAX_SLOTS, K, 2))
        for slot in (0, 1):
            heading = rng.uniform(0.0, 2.0 * np.pi) + np.cumsum(rng.uniform(-np.pi / 3, np.pi / 3, size=K - 1))
            steps = rng.uniform(0.5, 1.5, size=K - 1)[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
            p[slot, 1:] = np.cumsum(steps, axis=0)
        disp = np.diff(p[:2], axis=1)
        cos = (disp[:, 1:] * disp[:, :-1]).sum(axis=2) / (
            np.linalg.norm(disp[:, 1:], axis=2) * np.linalg.norm(disp[:, :-1], axis=2))
        if np.abs(cos - threshold).min() > 1e-3:
            break

    def fn(p):
        return smoothness_loss(p, VALID, theta0_deg=30.0, eps=0.05)[0]

    assert max_relative_error(fn, [p]) < GRAD_TOL
