"""Optimizers over named parameter dicts.

Updates mutate leaf tensor data in place between training steps; parameters
without a gradient after backward are left untouched.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float = 0.1):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * p.grad
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * p.grad ** 2
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
