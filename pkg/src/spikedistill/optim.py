"""SGD (momentum, coupled weight decay) and Adam over nested parameter lists.

Both follow the usual PyTorch update rules. Weight decay is L2 added to
the gradient before the update. Only parameters named ``weight``, ``bias``,
``gamma`` and ``beta`` are trained; batchnorm running statistics are not.
"""
from __future__ import annotations

import numpy as np

from .tensor import DTYPE

TRAINABLE = ("weight", "bias", "gamma", "beta")


def _trainable(params, grads):
    for i, (p, g) in enumerate(zip(params, grads)):
        for name in TRAINABLE:
            if name in p and g is not None and name in g:
                yield (i, name), p, g


def sgd_step(params, grads, state, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD update. ``state`` holds momentum buffers keyed by (layer, name)."""
    for key, p, g in _trainable(params, grads):
        d = g[key[1]]
        if weight_decay:
            d = d + DTYPE(weight_decay) * p[key[1]]
        if momentum:
            buf = state.get(key)
            buf = d.copy() if buf is None else DTYPE(momentum) * buf + d
            state[key] = buf
            d = buf
        p[key[1]] -= DTYPE(lr) * d
    return params


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """In-place Adam update with bias correction; ``state['step']`` counts calls."""
    b1, b2 = betas
    step = state.get("step", 0) + 1
    state["step"] = step
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for key, p, g in _trainable(params, grads):
        d = g[key[1]].astype(np.float64)
        if weight_decay:
            d = d + weight_decay * p[key[1]]
        m, v = state.get(key, (np.zeros_like(d), np.zeros_like(d)))
        m = b1 * m + (1.0 - b1) * d
        v = b2 * v + (1.0 - b2) * d * d
        state[key] = (m, v)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[key[1]] -= update.astype(DTYPE)
    return params


class Optimizer:
    """Small stateful wrapper so training loops can call ``opt.step(params, grads)``."""

    def __init__(self, name="sgd", lr=0.01, momentum=0.9, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        if name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {name!r}")
        self.name = name
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {}

    def step(self, params, grads):
        if self.name == "sgd":
            return sgd_step(params, grads, self.state, self.lr, self.momentum, self.weight_decay)
        return adam_step(params, grads, self.state, self.lr, self.betas, self.eps,
                         self.weight_decay)
