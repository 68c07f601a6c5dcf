"""Adam with one constant learning rate per parameter group."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of ``params`` for every group that has a gradient."""
        out = dict(params)
        for name, g in grads.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0.0:
                continue
            p = params[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            out[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def take(self, name: str, index) -> None:
        """Keep moments for a subset of rows (after pruning)."""
        if name in self.m:
            self.m[name] = self.m[name][index]
            self.v[name] = self.v[name][index]

    def extend(self, name: str, count: int) -> None:
        """Append zero moments for ``count`` new rows (after densification)."""
        if name in self.m:
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])

    def reset(self, name: str) -> None:
        if name in self.m:
            self.m[name] = np.zeros_like(self.m[name])
            self.v[name] = np.zeros_like(self.v[name])
