"""First-order optimizers, gradient clipping and parameter averaging."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


class Optimizer:
    """SGD or Adam over a fixed list of parameter tensors.

    Moment buffers are allocated once per parameter; ``step`` reads
    ``param.grad`` unless explicit ``grads`` are given.
    """

    def __init__(self, params, method="adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if method not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {method!r}")
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.method = method
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        if method == "adam":
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None, direction="descent"):
        if direction not in ("descent", "ascent"):
            raise ConfigError(f"direction must be 'descent' or 'ascent', got {direction!r}")
        if grads is None:
            grads = [p.grad for p in self.params]
        sign = -1.0 if direction == "descent" else 1.0
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if self.method == "sgd":
                p.data += sign * self.lr * g
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def step(opt, params, grads, direction="descent"):
    """Functional form: ``opt`` must have been built over ``params``."""
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ShapeError("optimizer was built for a different parameter list")
    opt.step(grads, direction=direction)
    return params


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))


def clip_grad_norm(grads, max_norm=1.0):
    """Rescale so the joint L2 norm is at most ``max_norm``; returns new arrays."""
    if not max_norm > 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return [None if g is None else g.copy() for g in grads]
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads]


def ema_update(shadow, params, rate=0.99):
    """shadow <- rate * shadow + (1 - rate) * param, in place."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"EMA rate must lie in [0, 1), got {rate}")
    for s, p in zip(shadow, params):
        value = p.data if hasattr(p, "data") else p
        if s.shape != np.shape(value):
            raise ShapeError(f"shadow shape {s.shape} does not match {np.shape(value)}")
        s *= rate
        s += (1.0 - rate) * value
    return shadow


class Ema:
    """Shadow copies of a parameter list, initialised to the current values."""

    def __init__(self, params, rate=0.99):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"EMA rate must lie in [0, 1), got {rate}")
        self.params = list(params)
        self.rate = rate
        self.shadow = [p.data.copy() for p in self.params]

    def update(self):
        ema_update(self.shadow, self.params, self.rate)

    def swap(self):
        """Exchange live and shadow values (call twice to restore)."""
        for p, s in zip(self.params, self.shadow):
            tmp = p.data.copy()
            p.data[...] = s
            s[...] = tmp
