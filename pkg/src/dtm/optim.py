"""Adam with decoupled weight decay, gradient clipping, warmup+cosine lr."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamState", "Adam", "clip_grad_norm", "LrSchedule"]


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared hyperparameters."""

    step: int
    m: np.ndarray
    v: np.ndarray
    beta1: float
    beta2: float
    eps: float
    weight_decay: float


class Adam:
    """Adam over a named parameter dict, AdamW-style weight decay.

    Weight decay is applied directly to the parameter alongside the
    moment-based update (it never enters the moments).  Update order is
    fixed by sorted parameter name, so seeded runs are bit-reproducible.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.95,
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if eps <= 0.0:
            raise ValueError("eps must be positive")
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def state_for(self, name: str) -> AdamState:
        return AdamState(
            step=self.step_count,
            m=self.m[name],
            v=self.v[name],
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay != 0.0:
                p.data -= lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    ps = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in ps))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for p in ps:
            p.grad = p.grad * factor
    return total


@dataclass
class LrSchedule:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.base_lr <= 0.0:
            raise ValueError("base_lr must be positive")

    def lr_at(self, step: int) -> float:
        if step < 0 or step > self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span == 0:
            return self.base_lr
        q = (step - self.warmup_steps) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * q))
