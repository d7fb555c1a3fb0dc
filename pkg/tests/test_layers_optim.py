import numpy as np
import pytest

from crash_recon.core.errors import ShapeError
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tape, parameter
from crash_recon.nn.gradcheck import max_relative_error
from crash_recon.nn.layers import MLP, Conv2d, GraphTransformerLayer, Linear, MultiHeadAttention
from crash_recon.nn.optim import AdamW, ParamGroup, adamw_update, clip_grad_norm


def test_linear_accepts_vectors_and_batches(rng):
    layer = Linear(3, 2, rng)
    assert layer(np.ones(3)).shape == (2,)
    assert layer(np.ones((4, 3))).shape == (4, 2)
    with pytest.raises(ShapeError):
        layer(np.ones(4))


def test_parameter_names_are_stable(rng):
    mlp = MLP([3, 4, 2], rng)
    names = [n for n, _ in mlp.named_parameters()]
    assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]


def test_zero_last_layer_outputs_zero(rng):
    mlp = MLP([3, 8, 2], rng, zero_last=True)
    np.testing.assert_array_equal(mlp(rng.normal(size=(5, 3))).data, 0.0)


def test_attention_masks_keys(rng):
    attn = MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(4, 8))
    mask = np.array([True, True, False, False])
    out, weights = attn(x, x, x, mask)
    assert out.shape == (4, 8)
    np.testing.assert_array_equal(weights.data[:, :, 2:], 0.0)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0)


def test_attention_without_keys_outputs_zero(rng):
    attn = MultiHeadAttention(4, 1, rng)
    x = rng.normal(size=(3, 4))
    out, _ = attn(x, x, x, np.zeros(3, dtype=bool))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_output_shape_and_gradient(rng):
    conv = Conv2d(2, 3, kernel=3, stride=2, rng=rng)
    x = rng.normal(size=(2, 9, 9))
    assert conv(x).shape == (3, 4, 4)

    def fn(x):
        return ad.tanh(conv(x)).sum()

    assert max_relative_error(fn, [x]) < 1e-4


def test_graph_layer_keeps_masked_nodes_at_zero(rng):
    layer = GraphTransformerLayer(8, 2, rng)
    x = ad.Tensor(rng.normal(size=(3, 8)))
    adjacency = np.ones((3, 3), dtype=bool)
    out = layer(x, adjacency, np.array([True, True, False]))
    np.testing.assert_array_equal(out.data[2], 0.0)
    assert np.all(np.isfinite(out.data))


def test_clip_grad_norm_scales_jointly():
    grads = [np.array([3.0, 0.0]), np.array([4.0])]
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped[0], [0.6, 0.0])
    np.testing.assert_allclose(clipped[1], [0.8])


def test_adamw_first_step_moves_by_lr():
    param, grad = np.array([1.0, -1.0]), np.array([0.5, -2.0])
    new, m, v = adamw_update(param, grad, np.zeros(2), np.zeros(2), 1, lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose(new, [0.9, -0.9], atol=1e-6)


def test_frozen_groups_stay_bit_identical(rng):
    a, b = parameter(rng.normal(size=3)), parameter(rng.normal(size=3))
    before, a_before = b.data.tobytes(), a.data.tobytes()
    opt = AdamW([ParamGroup("encoder", [b], 1e-2), ParamGroup("decoder", [a], 1e-2)])
    opt.set_frozen(["encoder"])
    for _ in range(3):
        opt.zero_grad()
        with Tape() as tape:
            loss = ((a + b) * (a + b)).sum()
        tape.backward(loss, [p for g in opt.active() for p in g.params])
        assert opt.step().applied
    assert b.data.tobytes() == before
    assert a.data.tobytes() != a_before


def test_non_finite_gradient_skips_step():
    p = parameter([1.0])
    opt = AdamW([ParamGroup("decoder", [p], 0.1)])
    p.grad = np.array([np.nan])
    result = opt.step()
    assert not result.applied
    assert opt.skipped == 1
    np.testing.assert_array_equal(p.data, [1.0])
