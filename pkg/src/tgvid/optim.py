from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A named learnable tensor. The momentum buffer appears on the first SGD step."""

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = None


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be a positive integer")

    def lr_at(self, epoch):
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


def sgd_step(params, config, epoch):
    """One SGD-with-momentum update with L2 weight decay folded into the gradient, then clear grads."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    lr = config.lr_at(epoch)
    for p in params:
        g = p.grad
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        if p.momentum_buffer is None:
            p.momentum_buffer = np.zeros_like(p.data)
        buf = p.momentum_buffer
        buf *= config.momentum
        buf += g
        p.data -= lr * buf
        p.grad = None
