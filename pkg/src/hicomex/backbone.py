"""Patch-learning feature extractor and the convolutional head stacks.

The input image passes a shared convolution, is split into a grid of tiles
processed by independent identical-structure branches, and is reassembled.
Two separate pooling stacks then produce the global facial feature map (the
crop source for per-AU features) and the landmark feature map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module, PReLU, Sequential
from .tensor import Tensor


@dataclass
class BackboneConfig:
    input_size: tuple[int, int] = (96, 96)
    input_channels: int = 1
    patch_grid: tuple[int, int] = (2, 4)
    patch_channels: int = 16
    featconv_channels: list[int] = field(default_factory=lambda: [32, 32])
    patch_stride: int = 1  # stride of the shared conv; >1 drops resolution early

    def __post_init__(self):
        rows, cols = self.patch_grid
        h, w = self.input_size
        if rows < 1 or cols < 1:
            raise ConfigError(f"patch_grid must be positive, got {self.patch_grid}")
        if self.patch_stride < 1:
            raise ConfigError(f"patch_stride must be >= 1, got {self.patch_stride}")
        if h % self.patch_stride or w % self.patch_stride:
            raise ConfigError(
                f"input size {self.input_size} not divisible by patch_stride "
                f"{self.patch_stride}")
        ph, pw = self.patch_spatial
        if ph % rows or pw % cols:
            raise ConfigError(
                f"patch feature size {(ph, pw)} not divisible by patch grid "
                f"{self.patch_grid}")
        if not self.featconv_channels:
            raise ConfigError("at least one pooling stage is required per head")
        span = 2 ** len(self.featconv_channels)
        if ph % span or pw % span:
            raise ConfigError(
                f"patch feature size {(ph, pw)} is not divisible by 2^stages={span}")

    @property
    def patch_spatial(self) -> tuple[int, int]:
        return (self.input_size[0] // self.patch_stride,
                self.input_size[1] // self.patch_stride)

    @property
    def head_spatial(self) -> tuple[int, int]:
        span = 2 ** len(self.featconv_channels)
        ph, pw = self.patch_spatial
        return ph // span, pw // span

    @property
    def head_channels(self) -> int:
        return self.featconv_channels[-1]


class ConvUnit(Module):
    """Conv 3x3 (pad 1) -> BatchNorm -> PReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.bn = BatchNorm2d(out_channels)
        self.act = PReLU(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class FeatConv(Module):
    """Two ConvUnits followed by 2x2 max pooling; halves both spatial extents."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.unit1 = ConvUnit(in_channels, out_channels)
        self.unit2 = ConvUnit(out_channels, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.data.shape[-2:]
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ConfigError(
                f"FeatConv needs even spatial extents >= 2 for pooling, got {h}x{w}")
        return T.max_pool2d(self.unit2(self.unit1(x)), 2)


class PatchConv(Module):
    """Shared conv, per-tile independent branches, tiles reconcatenated."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.shared = ConvUnit(cfg.input_channels, cfg.patch_channels,
                               stride=cfg.patch_stride)
        rows, cols = cfg.patch_grid
        self.branches = []
        for r in range(rows):
            for c in range(cols):
                branch = ConvUnit(cfg.patch_channels, cfg.patch_channels)
                setattr(self, f"branch_{r}_{c}", branch)
                self.branches.append(branch)

    def forward(self, image: Tensor) -> Tensor:
        if image.data.shape[-2:] != tuple(self.cfg.input_size):
            raise ConfigError(
                f"image spatial size {image.data.shape[-2:]} does not match "
                f"configured input size {self.cfg.input_size}")
        x = self.shared(image)
        rows, cols = self.cfg.patch_grid
        ph, pw = self.cfg.patch_spatial
        th = ph // rows
        tw = pw // cols
        out_rows = []
        for r in range(rows):
            tiles = []
            for c in range(cols):
                tile = x[..., r * th:(r + 1) * th, c * tw:(c + 1) * tw]
                tiles.append(self.branches[r * cols + c](tile))
            out_rows.append(T.concat(tiles, axis=-1))
        return T.concat(out_rows, axis=-2)


class Backbone(Module):
    """PatchConv trunk plus independent global and landmark pooling stacks."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = PatchConv(cfg)
        self.global_stack = self._stack()
        self.landmark_stack = self._stack()

    def _stack(self) -> Sequential:
        layers, prev = [], self.cfg.patch_channels
        for ch in self.cfg.featconv_channels:
            layers.append(FeatConv(prev, ch))
            prev = ch
        return Sequential(*layers)

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Return (global_feature, landmark_feature) maps."""
        patch_features = self.patch(image)
        return self.global_stack(patch_features), self.landmark_stack(patch_features)
