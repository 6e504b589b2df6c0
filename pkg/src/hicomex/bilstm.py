"""Intensity-distribution learning over the AU feature sequence.

The per-AU feature vectors of one image form a short sequence in fixed
ascending-AU order. Two LSTM cells with independent parameters consume it
left-to-right and right-to-left; their hidden states are concatenated per
position, projected back to the feature width, and added to the input so an
untrained module starts near identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .au_region import AUFeatureSet
from .errors import ConfigError
from .nn import Linear, Module, Parameter, uniform_fan_in
from .rng import SplitRng
from .tensor import Tensor


@dataclass
class BiLSTMConfig:
    d_au: int = 64
    hidden: int = 64


class LSTMCell(Module):
    """One-direction cell; gate order in the stacked weights is i, f, g, o."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_x = Parameter(np.zeros((4 * hidden_dim, input_dim)))
        self.w_h = Parameter(np.zeros((4 * hidden_dim, hidden_dim)))
        self.bias = Parameter(np.zeros(4 * hidden_dim))

    def reset_parameters(self, rng: SplitRng):
        self.w_x.data = uniform_fan_in(rng.child("w_x"), self.w_x.shape, self.input_dim)
        self.w_h.data = uniform_fan_in(rng.child("w_h"), self.w_h.shape, self.hidden_dim)
        bias = np.zeros(4 * self.hidden_dim)
        bias[self.hidden_dim:2 * self.hidden_dim] = 1.0  # forget gate opens first
        self.bias.data = bias

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        gates = x @ self.w_x.swapaxes(0, 1) + h @ self.w_h.swapaxes(0, 1) + self.bias
        hd = self.hidden_dim
        i = gates[:, 0 * hd:1 * hd].sigmoid()
        f = gates[:, 1 * hd:2 * hd].sigmoid()
        g = gates[:, 2 * hd:3 * hd].tanh()
        o = gates[:, 3 * hd:4 * hd].sigmoid()
        c_new = f * c + i * g
        return o * c_new.tanh(), c_new

    def run(self, steps: list[Tensor]) -> list[Tensor]:
        n = steps[0].data.shape[0]
        h = Tensor(np.zeros((n, self.hidden_dim)))
        c = Tensor(np.zeros((n, self.hidden_dim)))
        outputs = []
        for x in steps:
            h, c = self.step(x, h, c)
            outputs.append(h)
        return outputs


class BiLSTM(Module):
    def __init__(self, cfg: BiLSTMConfig):
        super().__init__()
        self.cfg = cfg
        self.forward_cell = LSTMCell(cfg.d_au, cfg.hidden)
        self.backward_cell = LSTMCell(cfg.d_au, cfg.hidden)
        self.proj = Linear(2 * cfg.hidden, cfg.d_au)

    def forward(self, aus: AUFeatureSet) -> AUFeatureSet:
        x = aus.vectors
        if x.data.ndim != 3:
            raise ConfigError(f"BiLSTM expects (N, seq, d_au), got {x.shape}")
        if x.data.shape[-1] != self.cfg.d_au:
            raise ConfigError(
                f"BiLSTM configured for d_au={self.cfg.d_au}, got {x.data.shape[-1]}")
        n_steps = x.data.shape[1]
        if n_steps == 0:
            raise ConfigError("BiLSTM requires a non-empty AU sequence")
        steps = [x[:, t] for t in range(n_steps)]
        h_fwd = self.forward_cell.run(steps)
        h_bwd = list(reversed(self.backward_cell.run(list(reversed(steps)))))
        # apply the 2h->d_au projection as two half products so swapping the
        # direction cells (with matching half swap) reverses outputs exactly
        h = self.cfg.hidden
        w_f = self.proj.weight[:, :h].swapaxes(0, 1)
        w_b = self.proj.weight[:, h:].swapaxes(0, 1)
        mixed = [h_fwd[t] @ w_f + h_bwd[t] @ w_b + self.proj.bias
                 for t in range(n_steps)]
        return aus.replace(x + T.stack(mixed, axis=1))
