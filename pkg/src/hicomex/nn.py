"""Layer modules composing the tensor primitives.

Parameters register themselves on assignment; ``named_parameters`` walks the
module tree with dotted paths, which also fixes the checkpoint entry order.
Initialization draws from per-parameter rng streams keyed by path, so adding
a sibling module never changes existing weights.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import SplitRng
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray):
        if name not in self._buffers:
            raise ConfigError(f"unknown buffer {name!r}")
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal ------------------------------------------------------

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, mod in self._modules.items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from mod.named_modules(sub)

    def named_parameters(self, prefix: str = ""):
        for path, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{path}.{name}" if path else name), p

    def named_buffers(self, prefix: str = ""):
        for path, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{path}.{name}" if path else name), b

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    # -- state ----------------------------------------------------------

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = np.asarray(b, dtype=np.float64).copy()
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        buffer_owners = {}
        for path, mod in self.named_modules():
            for name in mod._buffers:
                buffer_owners[f"{path}.{name}" if path else name] = (mod, name)
        for key, value in state.items():
            if key in params:
                if params[key].data.shape != value.shape:
                    raise ConfigError(
                        f"state entry {key!r} has shape {value.shape}, "
                        f"expected {params[key].data.shape}"
                    )
                params[key].data = value.copy()
            elif key in buffer_owners:
                mod, name = buffer_owners[key]
                mod.set_buffer(name, value.copy())
            else:
                raise ConfigError(f"unexpected state entry {key!r}")
        missing = (set(params) | set(buffer_owners)) - set(state)
        if missing:
            raise ConfigError(f"state is missing entries: {sorted(missing)}")

    # -- initialization --------------------------------------------------

    def init_params(self, rng: SplitRng):
        for path, mod in self.named_modules():
            reset = getattr(mod, "reset_parameters", None)
            if reset is not None:
                reset(rng.child("init", path) if path else rng.child("init"))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng: SplitRng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def reset_parameters(self, rng: SplitRng):
        self.weight.data = uniform_fan_in(rng.child("weight"), self.weight.shape,
                                          self.in_features)
        if self.bias is not None:
            self.bias.data = np.zeros(self.out_features)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.in_channels = in_channels
        self.weight = Parameter(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def reset_parameters(self, rng: SplitRng):
        fan_in = self.weight.shape[1] * self.weight.shape[2] * self.weight.shape[3]
        self.weight.data = uniform_fan_in(rng.child("weight"), self.weight.shape, fan_in)
        if self.bias is not None:
            self.bias.data = np.zeros(self.bias.shape)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)


class BatchNorm2d(Module):
    """Channel-wise batch normalization over (N, H, W).

    Running statistics update only in train mode; eval mode normalizes with
    the stored statistics, so repeated eval calls are bit-identical.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def reset_parameters(self, rng: SplitRng):
        self.gamma.data = np.ones(self.channels)
        self.beta.data = np.zeros(self.channels)
        self.set_buffer("running_mean", np.zeros(self.channels))
        self.set_buffer("running_var", np.ones(self.channels))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise DimensionError(f"BatchNorm2d expects (N,C,H,W), got {x.shape}")
        if x.data.shape[1] != self.channels:
            raise DimensionError(
                f"BatchNorm2d configured for {self.channels} channels, input has "
                f"{x.data.shape[1]}")
        if self.training:
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self.set_buffer("running_mean", (1 - m) * self.running_mean + m * mean)
            self.set_buffer("running_var", (1 - m) * self.running_var + m * var)
            return T.batch_norm(x, self.gamma, self.beta, self.eps)
        return T.batch_norm(x, self.gamma, self.beta, self.eps,
                            mean=self.running_mean, var=self.running_var)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, channel_axis: int = 1):
        super().__init__()
        self.channel_axis = channel_axis
        self.init = init
        self.alpha = Parameter(np.full(channels, init))

    def reset_parameters(self, rng: SplitRng):
        self.alpha.data = np.full(self.alpha.shape, self.init)

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.alpha, channel_axis=self.channel_axis)


class LayerNorm(Module):
    """Normalize the trailing feature axis, then apply a learned affine map."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def reset_parameters(self, rng: SplitRng):
        self.gamma.data = np.ones(self.dim)
        self.beta.data = np.zeros(self.dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.dim:
            raise DimensionError(
                f"LayerNorm dim {self.dim} does not match trailing axis of {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ((var + self.eps) ** -0.5) * self.gamma + self.beta


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {p}")
        self.p = p

    def forward(self, x: Tensor, rng: SplitRng | None = None) -> Tensor:
        return T.dropout(x, self.p, train=self.training, rng=rng)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, f"layer{i}", layer)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
