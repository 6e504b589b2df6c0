"""Co-occurrence relation learning with self-attention encoding layers.

Pre-processing lifts the AU feature sequence to the model width (linear,
layer norm, dropout) and adds a sinusoidal position code for the AU index.
Each encoding layer projects the same sequence to per-head queries, keys,
and values, mixes it with scaled dot-product attention, and applies the
usual output projection, residual add, and layer norm. A final linear maps
back to the AU feature width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .au_region import AUFeatureSet
from .errors import ConfigError, DimensionError
from .nn import Dropout, LayerNorm, Linear, Module
from .rng import SplitRng
from .tensor import Tensor


@dataclass
class AttentionConfig:
    d: int = 64
    d_k: int = 16
    d_v: int = 16
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.d != self.n_heads * self.d_v:
            raise ConfigError(
                f"model dim d={self.d} must equal n_heads*d_v="
                f"{self.n_heads * self.d_v}")
        if self.d_k != self.d_v:
            raise ConfigError(f"d_k={self.d_k} must equal d_v={self.d_v}")
        if self.n_layers < 1:
            raise ConfigError("at least one encoding layer is required")


def positional_encoding(au_count: int, d: int) -> np.ndarray:
    """Sinusoidal position code: sin at even dims, cos at odd dims."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even width, got d={d}")
    pos = np.arange(au_count, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((au_count, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def self_attention(q: Tensor, k: Tensor, v: Tensor,
                   scale: float | None = None) -> Tensor:
    """softmax(q kᵀ · scale) v with row-wise softmax; scale defaults to 1/√d_k."""
    if q.data.shape[-1] != k.data.shape[-1]:
        raise DimensionError(
            f"query dim {q.data.shape[-1]} != key dim {k.data.shape[-1]}")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise DimensionError(
            f"key count {k.data.shape[-2]} != value count {v.data.shape[-2]}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.data.shape[-1])
    weights = attention_weights(q, k, scale)
    return weights @ v


def attention_weights(q: Tensor, k: Tensor, scale: float) -> Tensor:
    return T.softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)


class PreProcess(Module):
    """Linear lift, layer norm, dropout, plus the positional code."""

    def __init__(self, d_au: int, d: int, au_count: int, dropout: float):
        super().__init__()
        self.lift = Linear(d_au, d)
        self.norm = LayerNorm(d)
        self.drop = Dropout(dropout)
        self.register_buffer("pe", positional_encoding(au_count, d))

    def forward(self, x: Tensor, rng: SplitRng | None = None) -> Tensor:
        return self.drop(self.norm(self.lift(x)), rng=rng) + self.pe


class MultiHeadProjections(Module):
    """Shared q/k/v/output maps used by both relation encoders."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.w_q = Linear(cfg.d, cfg.n_heads * cfg.d_k)
        self.w_k = Linear(cfg.d, cfg.n_heads * cfg.d_k)
        self.w_v = Linear(cfg.d, cfg.n_heads * cfg.d_v)
        self.w_out = Linear(cfg.n_heads * cfg.d_v, cfg.d)
        self.norm = LayerNorm(cfg.d)

    def split_heads(self, x: Tensor, width: int) -> Tensor:
        n, seq, _ = x.data.shape
        return x.reshape(n, seq, self.cfg.n_heads, width).transpose((0, 2, 1, 3))

    def join_heads(self, x: Tensor) -> Tensor:
        n, heads, seq, width = x.data.shape
        return x.transpose((0, 2, 1, 3)).reshape(n, seq, heads * width)


class EncoderLayer(MultiHeadProjections):
    """Post-norm self-attention encoding layer with residual path."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__(cfg)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x: Tensor, rng: SplitRng | None = None) -> Tensor:
        cfg = self.cfg
        q = self.split_heads(self.w_q(x), cfg.d_k)
        k = self.split_heads(self.w_k(x), cfg.d_k)
        v = self.split_heads(self.w_v(x), cfg.d_v)
        weights = attention_weights(q, k, 1.0 / math.sqrt(cfg.d_k))
        self.last_weights = weights.data.copy()
        mixed = self.join_heads(self.drop(weights, rng=rng) @ v)
        return self.norm(x + self.w_out(mixed))


class SelfAttentionEncoder(Module):
    """Pre-processing, n identical encoding layers, final width restore."""

    def __init__(self, d_au: int, au_count: int, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.pre = PreProcess(d_au, cfg.d, au_count, cfg.dropout)
        self.encoder_layers = []
        for i in range(cfg.n_layers):
            layer = EncoderLayer(cfg)
            setattr(self, f"layer{i}", layer)
            self.encoder_layers.append(layer)
        self.out = Linear(cfg.d, d_au)

    def forward(self, aus: AUFeatureSet, rng: SplitRng | None = None) -> AUFeatureSet:
        drop_rng = rng.child("pre") if rng is not None else None
        x = self.pre(aus.vectors, rng=drop_rng)
        for i, layer in enumerate(self.encoder_layers):
            x = layer(x, rng=rng.child("layer", i) if rng is not None else None)
        return aus.replace(self.out(x))
