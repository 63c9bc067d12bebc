"""Adam over a named group of parameter arrays, updated in place."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import kernels


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray | None]) -> None:
        """Apply one update; parameters with no gradient keep their moments."""
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            kernels.adam_update(param, g, self.m[name], self.v[name], self.lr,
                                self.beta1, self.beta2, self.eps, bias1, bias2)
