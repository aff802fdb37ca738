"""Adam optimizer over flat or structured float64 parameter arrays."""

from __future__ import annotations

import numpy as np

__all__ = ["AdamConfig", "Adam"]

from dataclasses import dataclass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """First/second-moment adaptive gradient descent with bias correction.

    State starts at zero, so coordinates whose gradient is exactly zero are
    never moved (no weight decay is applied).
    """

    def __init__(self, shapes: list[tuple[int, ...]], config: AdamConfig = AdamConfig()):
        self.config = config
        self.t = 0
        self.m = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float64) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update `params` in place from matching `grads`."""
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
