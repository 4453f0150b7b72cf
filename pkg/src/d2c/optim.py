"""AdamW, parameter EMA and the warmup-then-constant learning rate."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def scaled_lr(base_lr: float, batch_size: int, reference_batch: int = 256) -> float:
    """Linear scaling rule: ``base_lr`` is quoted per ``reference_batch`` samples."""
    return base_lr * batch_size / reference_batch


def warmup_lr(peak: float, step: int, warmup_steps: int) -> float:
    """Linear ramp to ``peak`` over ``warmup_steps`` optimizer steps, then flat."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return peak
    return peak * (step + 1) / warmup_steps


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.02):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.data.ndim > 1:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])


class EMA:
    """Shadow copy updated as ``ema <- momentum * ema + (1 - momentum) * param``."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9999):
        self.momentum = momentum
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        a = self.momentum
        for k, p in params.items():
            s = self.shadow[k]
            s *= a
            s += (1.0 - a) * p.data
