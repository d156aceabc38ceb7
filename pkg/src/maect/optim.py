"""Optimizers and learning-rate schedules operating on ``dict[str, Tensor]``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


def lr_schedule(step: float, total_steps: float, warmup_fraction: float) -> float:
    """Linear warmup 0 -> 1, then cosine 1 -> 0. Returns a multiplier."""
    if total_steps <= 0:
        return 1.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return step / warmup
    span = total_steps - warmup
    if span <= 0:
        return 1.0
    progress = (step - warmup) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def scaled_lr(base_lr: float, batch_size: int, views: int = 1) -> float:
    """Linear scaling rule: ``base_lr * batch_size * views / 256``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if views not in (1, 2):
        raise ValueError("views must be 1 or 2")
    return base_lr * batch_size * views / 256


def excluded_from_decay(name: str, tensor: Tensor) -> bool:
    # biases and norm weights (all 1-d parameters)
    return tensor.ndim <= 1 or name.endswith(".bias")


@dataclass
class ParamSpec:
    lr_scale: float = 1.0
    weight_decay: float = 0.0


class AdamW:
    """Decoupled weight decay Adam.

    Every parameter has its own lr multiplier; parameters with a zero
    multiplier are never touched, so frozen weights stay bit-identical.
    """

    def __init__(self, params: dict[str, Tensor], specs: dict[str, ParamSpec],
                 betas=(0.9, 0.95), eps: float = 1e-8):
        self.params = params
        self.specs = specs
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            spec = self.specs[name]
            rate = lr * spec.lr_scale
            if rate == 0.0 or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if spec.weight_decay:
                p.data *= 1.0 - rate * spec.weight_decay
            p.data -= rate * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        return out


class SGD:
    """SGD with (heavy-ball) momentum."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {n: np.zeros(p.shape) for n, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b = self.buf[name]
            b *= self.momentum
            b += g
            p.data -= lr * b

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def make_specs(params: dict[str, Tensor], weight_decay: float, lr_scales: dict[str, float] | None = None) -> dict[str, ParamSpec]:
    specs = {}
    for name, p in params.items():
        scale = 1.0 if lr_scales is None else lr_scales[name]
        wd = 0.0 if excluded_from_decay(name, p) else weight_decay
        specs[name] = ParamSpec(scale, wd)
    return specs
