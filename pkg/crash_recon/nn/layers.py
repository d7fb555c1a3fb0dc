"""
Parameterized building blocks on top of the tape engine.

Modules discover their parameters from attributes (tensors, sub-modules and
lists of sub-modules) in definition order, so parameter names and checkpoint
layout are stable for a fixed architecture.
"""

import math
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from crash_recon.core.errors import ShapeError
from crash_recon.nn import autodiff as ad
from crash_recon.nn.autodiff import Tensor


class Module:
    """Base class for anything that owns parameters"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for n, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{n}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    """y = x W + b with W of shape (in, out)"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, gain: float = 1.0, zero: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        w = np.zeros((in_dim, out_dim)) if zero else _xavier(rng, in_dim, out_dim, gain)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros((out_dim,)))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError("linear", x.shape, (self.in_dim, self.out_dim))
        if x.ndim == 1:
            return ad.reshape(ad.matmul(ad.reshape(x, (1, self.in_dim)), self.weight), (self.out_dim,)) + self.bias
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """ReLU perceptron; the last layer is linear"""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.layers = [
            Linear(a, b, rng, zero=zero_last and n == len(dims) - 2)
            for n, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for n, layer in enumerate(self.layers):
            h = layer(h)
            if n < len(self.layers) - 1:
                h = ad.relu(h)
        return h


class MultiHeadAttention(Module):
    """Scaled dot-product attention with key masks and an optional additive logit bias"""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.d_model = d_model
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng, gain=0.5)

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ad.transpose(ad.reshape(x, (n, self.heads, self.d_model // self.heads)), (1, 0, 2))

    def __call__(self, query, keys, values, key_mask, bias: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """
        :param query: (nq, D)
        :param keys: (nk, D)
        :param values: (nk, D)
        :param key_mask: (nk,) or (nq, nk) booleans, true where a key may be attended
        :param bias: optional (H, nq, nk) additive logits
        :return: output (nq, D) and attention weights (H, nq, nk)
        """
        query, keys, values = ad.as_tensor(query), ad.as_tensor(keys), ad.as_tensor(values)
        nq, nk = query.shape[0], keys.shape[0]
        mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), (nq, nk))
        q, k, v = self._split(self.q(query)), self._split(self.k(keys)), self._split(self.v(values))
        logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) / math.sqrt(self.d_model // self.heads)
        if bias is not None:
            logits = logits + bias
        weights = ad.masked_softmax(logits, mask[None, :, :], axis=-1)
        mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (nq, self.d_model))
        has_keys = mask.any(axis=1).astype(np.float64)[:, None]
        return self.o(mixed) * has_keys, weights


class Conv2d(Module):
    """Strided valid convolution expressed as patch extraction plus a matmul"""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, rng: np.random.Generator):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.weight = ad.parameter(_xavier(rng, in_ch * kernel * kernel, out_ch, gain=math.sqrt(2.0)))
        self.bias = ad.parameter(np.zeros((out_ch,)))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[0] != self.in_ch:
            raise ShapeError("conv2d", x.shape, (self.in_ch, self.kernel, self.kernel))
        patches, (oh, ow) = ad.unfold2d(x, self.kernel, self.stride)
        out = ad.matmul(patches, self.weight) + self.bias
        return ad.reshape(ad.transpose(out, (1, 0)), (self.out_ch, oh, ow))


class GraphTransformerLayer(Module):
    """Residual neighborhood attention followed by a residual feed-forward block"""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ffn = MLP([d_model, 2 * d_model, d_model], rng)

    def __call__(self, x: Tensor, adjacency: np.ndarray, node_mask: np.ndarray,
                 bias: Optional[Tensor] = None) -> Tensor:
        """
        :param x: (N, D) node features
        :param adjacency: (N, N) booleans, true where node i attends to node j
        :param node_mask: (N,) booleans; masked nodes neither send nor receive
        """
        node_mask = np.asarray(node_mask, dtype=bool)
        allowed = adjacency & node_mask[None, :] & node_mask[:, None]
        keep = node_mask.astype(np.float64)[:, None]
        h, _ = self.attn(x, x, x, allowed, bias)
        x = (x + h) * keep
        return (x + self.ffn(x)) * keep
