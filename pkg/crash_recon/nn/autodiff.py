"""
Reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active ``Tape`` when at least
one operand requires a gradient. ``backward`` walks the tape in reverse
creation order (a reverse topological order) and accumulates gradients.
Outside a tape every op is a plain numpy evaluation.
"""

import logging
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from crash_recon.core.errors import NonFiniteLossError, ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int]


def _stack() -> List["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tape:
    """Ordered record of differentiable operations for one forward pass"""

    def __init__(self):
        self.nodes: List["Tensor"] = []
        self.nonfinite_ops: List[str] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().remove(self)
        return False

    def backward(self, loss: "Tensor", params: Optional[Sequence["Tensor"]] = None) -> None:
        """
        Populate ``.grad`` of every leaf reachable from ``loss``
        :param loss: scalar tensor recorded on this tape
        :param params: leaves that must end with a gradient buffer (zeros if unreachable)
        """
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, ())
        if not np.isfinite(loss.data).all():
            raise NonFiniteLossError(f"loss is not finite ({float(loss.data.reshape(-1)[0])})")
        for p in params or ():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        grads = {id(loss): np.ones_like(loss.data)}
        if loss._backward is None:
            if loss.requires_grad:
                loss._accumulate(grads[id(loss)])
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class no_grad:
    """Suspend recording on every tape inside the block"""

    def __enter__(self) -> "no_grad":
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


class Tensor:
    """Dense float64 array with an optional gradient buffer and graph link"""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
        if not np.isfinite(out.data).all():
            tape.nonfinite_ops.append(op)
            logger.debug(f"non-finite values produced by {op}")
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---- elementwise binary ---------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), backward)


def where(cond, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _make("where", out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ---- elementwise unary ----------------------------------------------------

def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def tabs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def softplus(a: ArrayLike, beta: Union[float, np.ndarray] = 1.0) -> Tensor:
    """(1/beta) log(1 + exp(beta x)), evaluated without overflow"""
    a = as_tensor(a)
    beta = np.asarray(beta, dtype=np.float64)
    z = beta * a.data
    out = np.logaddexp(0.0, z) / beta
    return _make("softplus", out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * z)),))


def clamp_soft(a: ArrayLike, lo: ArrayLike, hi: ArrayLike, beta: Union[float, np.ndarray] = 1.0) -> Tensor:
    """Smooth clamp lo + sp(x - lo) - sp(x - hi); monotone and differentiable"""
    lo, hi = as_tensor(lo), as_tensor(hi)
    return lo + softplus(a - lo, beta) - softplus(a - hi, beta)


def stop_gradient(a: ArrayLike) -> Tensor:
    return Tensor(as_tensor(a).data.copy())


# ---- reductions -----------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make("sum", out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _make("mean", out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


def masked_mean(a: ArrayLike, mask, axis: Optional[int] = None) -> Tensor:
    """Mean over entries where mask is true; an empty selection yields 0 with zero gradient"""
    a = as_tensor(a)
    w = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    count = w.sum(axis=axis)
    total = (a.data * w).sum(axis=axis)
    safe = np.where(count > 0, count, 1.0)
    out = np.where(count > 0, total / safe, 0.0)

    def backward(g):
        scale = np.where(count > 0, g / safe, 0.0)
        if axis is not None:
            scale = np.expand_dims(scale, axis)
        return (np.broadcast_to(scale, a.shape) * w,)

    return _make("masked_mean", out, (a,), backward)


def l2norm(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm; value and gradient are exactly zero at the origin"""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * a.data / safe, 0.0),)

    return _make("l2norm", out, (a,), backward)


def cos_sim(a: ArrayLike, b: ArrayLike, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; zero when either vector is zero"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cos_sim", a.shape, b.shape)
    na = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data ** 2).sum(axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = np.where(ok, dot / denom, 0.0)

    def backward(g):
        g = np.expand_dims(g, axis)
        sa, sb = np.where(ok, na, 1.0), np.where(ok, nb, 1.0)
        ga = np.where(ok, g * (b.data / denom - c * a.data / (sa * sa)), 0.0)
        gb = np.where(ok, g * (a.data / denom - c * b.data / (sb * sb)), 0.0)
        return ga, gb

    return _make("cos_sim", np.squeeze(c, axis=axis), (a, b), backward)


def smooth_l1(a: ArrayLike, target: ArrayLike = 0.0, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - beta / 2 outside"""
    d = sub(a, target)
    ad = np.abs(d.data)
    out = np.where(ad < beta, 0.5 * d.data ** 2 / beta, ad - 0.5 * beta)
    return _make("smooth_l1", out, (d,),
                 lambda g: (g * np.where(ad < beta, d.data / beta, np.sign(d.data)),))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def masked_softmax(a: ArrayLike, mask, axis: int = -1) -> Tensor:
    """Softmax over entries where mask is true; rows without valid entries are all zero"""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    logits = np.where(mask, a.data, -np.inf)
    m = logits.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data - m, 0.0)), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    s = np.where(z > 0, e / np.where(z > 0, z, 1.0), 0.0)
    return _make("masked_softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cumsum(a: ArrayLike, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    return _make("cumsum", np.cumsum(a.data, axis=axis), (a,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


# ---- shape ----------------------------------------------------------------

def getitem(a: ArrayLike, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(out, dtype=np.float64), (a,), backward)


def take(a: ArrayLike, indices, axis: int = 0) -> Tensor:
    index = [slice(None)] * as_tensor(a).ndim
    index[axis] = np.asarray(indices, dtype=np.int64)
    return getitem(a, tuple(index))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None
    return _make("stack", out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def unfold_index(channels: int, height: int, width: int, kernel: int, stride: int):
    """Fancy index gathering (patches, C*k*k) windows from a (C, H, W) array"""
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    c, ki, kj = np.meshgrid(np.arange(channels), np.arange(kernel), np.arange(kernel), indexing="ij")
    oi, oj = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    rows = (oi.reshape(-1, 1) * stride) + ki.reshape(1, -1)
    cols = (oj.reshape(-1, 1) * stride) + kj.reshape(1, -1)
    chans = np.broadcast_to(c.reshape(1, -1), rows.shape)
    return (chans, rows, cols), (out_h, out_w)


def unfold2d(a: ArrayLike, kernel: int, stride: int) -> Tuple[Tensor, Tuple[int, int]]:
    a = as_tensor(a)
    if a.ndim != 3:
        raise ShapeError("unfold2d", a.shape)
    index, grid = unfold_index(*a.shape, kernel, stride)
    return getitem(a, index), grid


def backward(loss: Tensor, tape: Optional[Tape] = None, params: Optional[Sequence[Tensor]] = None) -> None:
    """Backpropagate through ``tape`` (default: the innermost active tape)"""
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward needs a tape")
    tape.backward(loss, params)
