"""Co-occurrence relation learning with a continuous Hopfield layer.

Structurally a self-attention encoding layer whose attention update runs
iteratively: the per-head query state is initialized from the projected AU
features and repeatedly replaced by its softmax-weighted retrieval over the
fixed keys and values, sharpened by the inverse temperature. Requiring
d_v == d_k lets the retrieved pattern act directly as the next query state,
so extra steps add no parameters. Iteration stops early once successive
states agree below the configured threshold; the backward pass unrolls
exactly the executed steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .attention import MultiHeadProjections, PreProcess, attention_weights
from .au_region import AUFeatureSet
from .errors import ConfigError
from .nn import Linear, Module
from .rng import SplitRng
from .tensor import Tensor


@dataclass
class HopfieldConfig:
    d: int = 64
    d_k: int = 16
    d_v: int = 16
    n_heads: int = 4
    n_layers: int = 1
    dropout: float = 0.1
    update_steps: int = 3
    beta: float = 2.0
    convergence_epsilon: float = 1e-4

    def __post_init__(self):
        if self.d != self.n_heads * self.d_v:
            raise ConfigError(
                f"model dim d={self.d} must equal n_heads*d_v="
                f"{self.n_heads * self.d_v}")
        if self.d_k != self.d_v:
            raise ConfigError(
                f"the iterated update needs d_v == d_k, got d_k={self.d_k}, "
                f"d_v={self.d_v}")
        if not 1 <= self.update_steps <= 32:
            raise ConfigError(f"update_steps must be in [1, 32], got {self.update_steps}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigError(f"beta must be finite and positive, got {self.beta}")
        if self.convergence_epsilon <= 0:
            raise ConfigError("convergence_epsilon must be positive")


def hopfield_update(state: Tensor, k: Tensor, v: Tensor, beta: float,
                    d_k: int | None = None) -> Tensor:
    """One retrieval step: softmax(beta · state kᵀ / √d_k) v."""
    if d_k is None:
        d_k = state.data.shape[-1]
    return attention_weights(state, k, beta / math.sqrt(d_k)) @ v


class HopfieldLayer(MultiHeadProjections):
    def __init__(self, cfg: HopfieldConfig):
        super().__init__(cfg)
        self.update_steps = cfg.update_steps
        self.beta = cfg.beta
        self.epsilon = cfg.convergence_epsilon
        self.executed_steps = 0

    def forward(self, x: Tensor, rng: SplitRng | None = None) -> Tensor:
        cfg = self.cfg
        state = self.split_heads(self.w_q(x), cfg.d_k)
        k = self.split_heads(self.w_k(x), cfg.d_k)
        v = self.split_heads(self.w_v(x), cfg.d_v)
        executed = 0
        for _ in range(self.update_steps):
            new_state = hopfield_update(state, k, v, self.beta, cfg.d_k)
            executed += 1
            delta = float(abs(new_state.data - state.data).max())
            state = new_state
            if delta < self.epsilon:
                break
        self.executed_steps = executed
        return self.norm(x + self.w_out(self.join_heads(state)))


class HopfieldEncoder(Module):
    """Pre-processing, iterated-retrieval layers, final width restore."""

    def __init__(self, d_au: int, au_count: int, cfg: HopfieldConfig):
        super().__init__()
        self.cfg = cfg
        self.pre = PreProcess(d_au, cfg.d, au_count, cfg.dropout)
        self.encoder_layers = []
        for i in range(cfg.n_layers):
            layer = HopfieldLayer(cfg)
            setattr(self, f"layer{i}", layer)
            self.encoder_layers.append(layer)
        self.out = Linear(cfg.d, d_au)

    def forward(self, aus: AUFeatureSet, rng: SplitRng | None = None) -> AUFeatureSet:
        drop_rng = rng.child("pre") if rng is not None else None
        x = self.pre(aus.vectors, rng=drop_rng)
        for layer in self.encoder_layers:
            x = layer(x)
        return aus.replace(self.out(x))
