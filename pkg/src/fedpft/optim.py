"""In-place optimisers over dicts of float32 parameter arrays."""

from __future__ import annotations

from typing import Mapping

import numpy as np


class AdamW:
    """Decoupled weight decay Adam (Loshchilov & Hutter)."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(v.shape, np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, np.float64) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr == 0:
            return
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p
            p -= (lr * update).astype(p.dtype)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float, masks=None) -> None:
    """Plain gradient descent; ``masks[name]`` zeroes entries that must not move."""
    for k, g in grads.items():
        if masks is not None and k in masks:
            g = g * masks[k]
        params[k] -= (lr * g).astype(params[k].dtype)
