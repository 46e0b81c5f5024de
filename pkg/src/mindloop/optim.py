"""Parameter updates for the trained models.

Updates operate directly on ``Tensor.data``/``Tensor.grad`` numpy buffers;
the tape only ever sees the forward pass.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; lr=0 leaves parameters untouched."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self._t
        bc2 = 1.0 - b2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise NumericError("parameter update produced non-finite values")


class GradientDescent:
    """Plain fixed-step gradient descent (used by the feature aligner)."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            p.data -= self.lr * p.grad
            if not np.all(np.isfinite(p.data)):
                raise NumericError("parameter update produced non-finite values")
