"""Adam over flat name->array parameter dicts; updates in place."""

from __future__ import annotations

from typing import Dict

import numpy as np

Array = np.ndarray


class Adam:
    def __init__(self, params: Dict[str, Array], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}

    def update(self, grads: Dict[str, Array]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.step_count
        correction2 = 1.0 - b2 ** self.step_count
        for name in sorted(self.params):
            g = grads[name].astype(np.float32)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params[name] -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
