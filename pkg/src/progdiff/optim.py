"""AdamW with global gradient-norm clipping.

Decoupled weight decay, bias-corrected moments, and a single global norm
clip applied to all gradients before the moment update. Training defaults
(lr 1e-4, weight decay 0.01, clip 2.0) live in the run configuration.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in parameter '{name}'")


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def adamw_step(params: dict, state: dict, lr=1e-4, betas=(0.9, 0.999),
               eps=1e-8, weight_decay=0.01, clip_norm=2.0) -> dict:
    """One AdamW update over named parameters, in place.

    params: name -> Tensor with .grad populated (missing grads count as zero).
    state:  moment buffers; pass {} on the first call and reuse after.
    """
    if clip_norm is not None and clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteGradient(name)

    scale = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(params)
        if norm > clip_norm:
            scale = clip_norm / norm

    b1, b2 = betas
    step = state.get("step", 0) + 1
    state["step"] = step
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        elif scale != 1.0:
            g = g * scale
        if name not in state:
            state[name] = (np.zeros_like(t.data), np.zeros_like(t.data))
        m, v = state[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state[name] = (m, v)
        if weight_decay:
            t.data -= lr * weight_decay * t.data
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, clip_norm=2.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = {}

    def step(self):
        adamw_step(self.params, self.state, lr=self.lr, betas=self.betas,
                   eps=self.eps, weight_decay=self.weight_decay,
                   clip_norm=self.clip_norm)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
