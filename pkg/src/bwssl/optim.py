"""Optimizers: layerwise-adaptive SGD (trust-ratio scaling) for pretraining,
plain momentum SGD for probes, and cosine learning-rate decay.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NonFiniteError


def default_exclude(name: str) -> bool:
    """Biases and normalization parameters skip adaptation and weight decay."""
    return name.endswith(("/bias", "/gamma", "/beta"))


class CosineSchedule:
    """lr(t) = base * 0.5 * (1 + cos(pi * progress)) after linear warmup."""

    def __init__(self, base_lr: float, total_steps: int, warmup_steps: int = 0):
        if total_steps < 1 or warmup_steps < 0 or warmup_steps >= total_steps:
            raise ConfigurationError(
                f"bad schedule: total={total_steps}, warmup={warmup_steps}")
        self.base_lr = float(base_lr)
        self.total_steps = int(total_steps)
        self.warmup_steps = int(warmup_steps)

    def lr(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ConfigurationError(f"step {t} outside [0, {self.total_steps}]")
        if t < self.warmup_steps:
            return self.base_lr * (t + 1) / self.warmup_steps
        progress = (t - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def _check_finite(name: str, g: np.ndarray):
    if not np.isfinite(g).all():
        raise NonFiniteError(f"non-finite gradient in {name}; step aborted")


def _norm(a: np.ndarray):
    # stays in the parameter dtype so f32 training math is f32 end to end
    return np.sqrt((a * a).sum())


class LARS:
    """Trust-ratio-scaled momentum SGD.

    Adapted parameters: local_rate = trust*||w|| / (||g|| + wd*||w|| + eps),
    buffer <- m*buffer + local_rate*lr*(g + wd*w), w <- w - buffer.
    Excluded parameters (biases/normalization) fall back to plain momentum
    SGD without weight decay: w <- w - lr*(m*buffer + g).
    """

    def __init__(self, named_params, trust: float = 0.001, momentum: float = 0.9,
                 weight_decay: float = 1e-6, eps: float = 1e-9, exclude=None):
        self.named_params = list(named_params)
        self.trust = trust
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eps = eps
        self.exclude = default_exclude if exclude is None else exclude
        self.buffers = [np.zeros_like(p.data) for _, p in self.named_params]

    def parameters(self):
        return [p for _, p in self.named_params]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float):
        for (name, p), buf in zip(self.named_params, self.buffers):
            g = p.grad
            if g is None:
                if not buf.any():
                    continue
                g = np.zeros_like(p.data)
            _check_finite(name, g)
            dtype = p.data.dtype
            if self.exclude(name):
                buf *= dtype.type(self.momentum)
                buf += g
                p.data -= dtype.type(lr) * buf
                continue
            wd = dtype.type(self.weight_decay)
            w_norm = _norm(p.data)
            g_norm = _norm(g)
            local = dtype.type(self.trust) * w_norm / (g_norm + wd * w_norm
                                                       + dtype.type(self.eps))
            buf *= dtype.type(self.momentum)
            buf += local * dtype.type(lr) * (g + wd * p.data)
            p.data -= buf


class SGD:
    """Momentum SGD with optional weight decay (probe training)."""

    def __init__(self, named_params, momentum: float = 0.0, weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for _, p in self.named_params]

    def parameters(self):
        return [p for _, p in self.named_params]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float):
        for (name, p), buf in zip(self.named_params, self.buffers):
            g = p.grad
            if g is None:
                if not buf.any():
                    continue
                g = np.zeros_like(p.data)
            _check_finite(name, g)
            dtype = p.data.dtype
            if self.weight_decay:
                g = g + dtype.type(self.weight_decay) * p.data
            buf *= dtype.type(self.momentum)
            buf += g
            p.data -= dtype.type(lr) * buf
