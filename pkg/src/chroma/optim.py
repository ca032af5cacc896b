"""Minibatch SGD with classical momentum.

    v <- mu * v + g
    theta <- theta - lr * v
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


def sgd_momentum_step(params: Mapping[str, Tensor], velocity: Dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """Update ``params`` and ``velocity`` in place from the params' ``.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        v = velocity[name]
        v *= v.dtype.type(momentum)
        if p.grad is not None:
            v += p.grad
        p.data -= p.dtype.type(lr) * v


class SGDMomentum:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.01, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.zeros_like(p.data)) for name, p in params.items()
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        sgd_momentum_step(self.params, self.velocity, self.lr, self.momentum)
