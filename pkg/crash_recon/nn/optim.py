"""AdamW with named parameter groups and global-norm gradient clipping."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from crash_recon.nn.autodiff import Tensor

logger = logging.getLogger(__name__)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], clip_norm: float) -> Tuple[List[np.ndarray], float]:
    """Scale gradients so their joint L2 norm is at most ``clip_norm``; returns (grads, original norm)"""
    norm = global_norm(grads)
    if norm <= clip_norm or norm == 0.0:
        return [g.copy() for g in grads], norm
    scale = clip_norm / norm
    return [g * scale for g in grads], norm


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One decoupled-weight-decay Adam update; returns (param, m, v)"""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    param = param - lr * weight_decay * param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


@dataclass
class ParamGroup:
    name: str
    params: List[Tensor]
    lr: float
    frozen: bool = False


@dataclass
class StepResult:
    applied: bool
    grad_norm: Optional[float]


@dataclass
class AdamW:
    """Grouped AdamW; frozen groups are never touched"""
    groups: List[ParamGroup]
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    skipped: int = 0
    state: Dict[int, Tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)

    def set_frozen(self, frozen: Sequence[str]) -> None:
        for group in self.groups:
            group.frozen = group.name in frozen

    def set_lr(self, name: str, lr: float) -> None:
        for group in self.groups:
            if group.name == name:
                group.lr = lr

    def active(self) -> List[ParamGroup]:
        return [g for g in self.groups if not g.frozen]

    def step(self) -> StepResult:
        groups = self.active()
        params = [p for g in groups for p in g.params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            logger.warning(f"non-finite gradient, optimizer step skipped ({self.skipped} so far)")
            return StepResult(applied=False, grad_norm=None)
        clipped, norm = clip_grad_norm(grads, self.clip_norm)
        self.step_count += 1
        n = 0
        for group in groups:
            for p in group.params:
                m, v, t = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data), 0))
                p.data, m, v = adamw_update(p.data, clipped[n], m, v, t + 1, group.lr,
                                            self.weight_decay, self.betas, self.eps)
                self.state[id(p)] = (m, v, t + 1)
                n += 1
        return StepResult(applied=True, grad_norm=norm)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()
