"""SGD with momentum, weight decay, and the stepwise learning-rate schedule."""

from __future__ import annotations

import numpy as np


def decays(name: str) -> bool:
    """Weight decay skips biases and normalization scale/shift."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("bias", "beta", "gamma")


def schedule_lr(base_lr: float, epoch: int, decay: float = 0.3,
                every: int = 2) -> float:
    """Base rate multiplied by ``decay`` once per ``every`` epochs."""
    return base_lr * decay ** (epoch // every)


class SGD:
    """Momentum SGD over an explicit (name, parameter) list.

    Parameters not handed to the optimizer are never touched, which is how
    stage-2 freezing works. Momentum buffers are exposed by name so resume
    restores the exact trajectory.
    """

    def __init__(self, named_params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def step(self):
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and decays(name):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def state_entries(self, prefix: str = "momentum/") -> dict:
        return {prefix + name: v.copy() for name, v in self.velocity.items()}

    def load_state_entries(self, entries: dict, prefix: str = "momentum/"):
        for name in self.velocity:
            key = prefix + name
            if key in entries:
                self.velocity[name] = entries[key].copy()
