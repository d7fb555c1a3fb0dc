import numpy as np
import pytest

from crash_recon.core.errors import NonFiniteLossError, ShapeError
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tape, Tensor, no_grad, parameter
from crash_recon.nn.gradcheck import max_relative_error

TOL = 1e-4


def away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


@pytest.mark.parametrize("seed", range(5))
def test_broadcast_arithmetic_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), away_from_zero(rng, (4,))

    def fn(x, y):
        return (x * y + x / y - y).sum()

    assert max_relative_error(fn, [a, b]) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_matmul_and_activations(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))

    def fn(x, w):
        h = ad.matmul(x, w)
        return (ad.tanh(h) + ad.sigmoid(h) + ad.softplus(h, 2.0) + ad.exp(0.1 * h)).mean()

    assert max_relative_error(fn, [x, w]) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_norms_and_similarity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))

    def fn(a, b):
        return ad.l2norm(a, axis=-1).sum() + (ad.cos_sim(a, b) * ad.l2norm(b)).sum()

    assert max_relative_error(fn, [a, b]) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_softmax_family(seed):
    rng = np.random.default_rng(seed)
    logits, target = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    mask = np.array([[1, 1, 0, 1, 0], [1, 1, 1, 1, 1], [0, 1, 0, 0, 0]], dtype=bool)

    def fn(logits, target):
        return (ad.softmax(logits) * target).sum() + (ad.masked_softmax(logits, mask) * target).sum()

    assert max_relative_error(fn, [logits, target]) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_indexing_and_reshaping(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 3))

    def fn(a):
        picked = ad.take(a, [0, 2, 2], axis=0)
        stacked = ad.stack([picked[:, 0], picked[:, 1]], axis=1)
        joined = ad.concat([stacked, ad.reshape(a[1:, :2], (3, 2))], axis=0)
        return (ad.cumsum(joined, axis=0) * ad.transpose(joined, (1, 0)).T).sum()

    assert max_relative_error(fn, [a]) < TOL


def test_smooth_l1_and_clamp(rng):
    x = away_from_zero(rng, (10,), margin=0.3) * 2.0

    def fn(x):
        return ad.smooth_l1(x, 0.1, beta=1.0).sum() + ad.clamp_soft(x, -1.0, 1.0, 4.0).sum()

    assert max_relative_error(fn, [x]) < TOL


def test_masked_mean_with_empty_selection_has_zero_gradient():
    x = parameter(np.arange(6.0).reshape(2, 3))
    mask = np.array([[False, False, False], [True, False, True]])
    with Tape() as tape:
        out = ad.masked_mean(x, mask, axis=1).sum()
    tape.backward(out, [x])
    assert out.item() == pytest.approx(4.0)
    np.testing.assert_allclose(x.grad, [[0, 0, 0], [0.5, 0, 0.5]])


def test_l2norm_is_zero_with_zero_gradient_at_origin():
    x = parameter(np.zeros((1, 2)))
    with Tape() as tape:
        out = ad.l2norm(x).sum()
    tape.backward(out, [x])
    assert out.item() == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


def test_shared_subexpression_accumulates():
    x = parameter([2.0])
    with Tape() as tape:
        y = x * x
        out = (y + y * 3.0).sum()
    tape.backward(out, [x])
    np.testing.assert_allclose(x.grad, [16.0])


def test_non_finite_loss_raises():
    x = parameter([0.0])
    with Tape() as tape:
        out = ad.log(x).sum()
    with pytest.raises(NonFiniteLossError):
        tape.backward(out, [x])
    assert "log" in tape.nonfinite_ops


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_backward_needs_scalar_loss():
    x = parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_recording_outside_tape_or_inside_no_grad():
    x = parameter(np.ones(2))
    y = x * 3.0
    assert not y.requires_grad
    with Tape() as tape:
        with no_grad():
            z = x * 3.0
        w = x * 3.0
    assert not z.requires_grad
    assert w.requires_grad
    assert len(tape.nodes) == 1


def test_unreachable_params_receive_zero_gradient():
    x, unused = parameter([1.0]), parameter([5.0])
    with Tape() as tape:
        out = (x * 2.0).sum()
    tape.backward(out, [x, unused])
    np.testing.assert_array_equal(unused.grad, [0.0])
    np.testing.assert_array_equal(x.grad, [2.0])


def test_numpy_operands_defer_to_tensor():
    x = parameter(np.ones(3))
    with Tape():
        y = np.full(3, 2.0) * x
    assert isinstance(y, Tensor)
    assert y.requires_grad


def test_stop_gradient_blocks_flow():
    x = parameter([3.0])
    with Tape() as tape:
        out = (x * ad.stop_gradient(x)).sum()
    tape.backward(out, [x])
    np.testing.assert_allclose(x.grad, [3.0])
