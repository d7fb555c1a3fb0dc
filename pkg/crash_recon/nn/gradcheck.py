"""Central finite-difference checks for tape gradients."""

from typing import Callable, List, Sequence

import numpy as np

from crash_recon.nn.autodiff import Tape, Tensor, parameter


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    params = [parameter(x) for x in inputs]
    with Tape() as tape:
        loss = fn(*params)
    tape.backward(loss, params)
    return [p.grad.copy() for p in params]


def numeric_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> List[np.ndarray]:
    base = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    grads = []
    for n, x in enumerate(base):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            up = fn(*[Tensor(v) for v in base]).item()
            x[idx] = orig - h
            down = fn(*[Tensor(v) for v in base]).item()
            x[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                       floor: float = 1e-3) -> float:
    """Largest |analytic - numeric| / (max(|analytic|, |numeric|) + floor) over all entries"""
    worst = 0.0
    for a, n in zip(analytic_grads(fn, inputs), numeric_grads(fn, inputs, h)):
        scale = np.maximum(np.abs(a), np.abs(n)) + floor
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst
