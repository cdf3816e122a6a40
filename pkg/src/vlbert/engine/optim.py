"""Adam, SGD with momentum, and learning-rate schedules.

Weight decay is folded into the gradient as ``g + wd * theta`` before either
update rule runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Moment buffers keyed by parameter position, plus the step counter."""

    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], second_moment: bool = True) -> "OptimizerState":
        return cls(
            first=[np.zeros_like(p.data) for p in params],
            second=[np.zeros_like(p.data) for p in params] if second_moment else [],
            step=0,
        )


def _check_congruent(params, grads, buffers):
    if len(params) != len(grads) or len(params) != len(buffers):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, b in zip(params, grads, buffers):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if b.shape != p.shape:
            raise ValueError(f"state buffer shape {b.shape} != parameter shape {p.shape}")


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check_congruent(params, grads, state.first)
    _check_congruent(params, grads, state.second)
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        g = np.zeros_like(p.data) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """``v <- mu v + g``; ``theta <- theta - lr v``, in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check_congruent(params, grads, state.first)
    state.step += 1
    for p, g, vel in zip(params, grads, state.first):
        g = np.zeros_like(p.data) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.data
        vel *= momentum
        vel += g
        p.data -= (lr * vel).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 2e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.state = OptimizerState.for_params(self.params)

    kind = "adam"

    def step(self, lr: Optional[float] = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr if lr is None else lr,
                  self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGDMomentum:
    def __init__(self, params: Iterable[Tensor], lr: float = 5e-3, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.state = OptimizerState.for_params(self.params, second_moment=False)

    kind = "sgd"

    def step(self, lr: Optional[float] = None) -> None:
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.state, self.lr if lr is None else lr,
                          self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup must be shorter than the schedule")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


def step_decay_schedule(step: int, base_lr: float, warmup_steps: int,
                        milestones: Sequence[int], gamma: float = 0.1) -> float:
    """Linear warmup, then multiply by ``gamma`` at each milestone step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * gamma ** sum(step >= m for m in milestones)
