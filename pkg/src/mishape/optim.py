"""Adam with optional exponential learning-rate decay."""

from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, decay_to: float = 1.0, decay_steps: int = 0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay_to = decay_to
        self.decay_steps = decay_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def current_lr(self) -> float:
        if self.decay_steps <= 0:
            return self.lr
        return self.lr * self.decay_to ** min(1.0, self.step_count / self.decay_steps)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; entries without a gradient are kept as-is."""
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        out = dict(params)
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            out[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
