"""Landmark prediction, AU centers, and per-AU local feature extraction.

A stylized 49-point frontal face template anchors everything: the synthetic
renderer emits landmarks from it, and the default AU-center table maps each
action unit to an affine combination of template indices plus an offset,
following FACS region descriptions (brows for AU1/2/4, lids for AU5/7,
cheek for AU6, nose root for AU9, mouth region for the rest). AU12 and
AU15 share the lip-corner midpoint: both act on the same facial region and
are told apart by appearance, not location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module
from .backbone import ConvUnit
from .tensor import Tensor

# 49-point template: 10 brow, 9 nose, 12 eye, 18 mouth points, normalized
# image coordinates (x right, y down).
FACE_TEMPLATE_49 = np.array([
    # left brow 0-4 (outer to inner), right brow 5-9 (inner to outer)
    (0.200, 0.300), (0.255, 0.285), (0.310, 0.278), (0.365, 0.282), (0.420, 0.292),
    (0.580, 0.292), (0.635, 0.282), (0.690, 0.278), (0.745, 0.285), (0.800, 0.300),
    # nose bridge 10-13, nostril line 14-18
    (0.500, 0.340), (0.500, 0.395), (0.500, 0.450), (0.500, 0.505),
    (0.420, 0.540), (0.460, 0.552), (0.500, 0.558), (0.540, 0.552), (0.580, 0.540),
    # left eye 19-24: outer corner, two top, inner corner, two bottom
    (0.240, 0.380), (0.285, 0.362), (0.335, 0.362), (0.380, 0.380),
    (0.335, 0.398), (0.285, 0.398),
    # right eye 25-30: inner corner, two top, outer corner, two bottom
    (0.620, 0.380), (0.665, 0.362), (0.715, 0.362), (0.760, 0.380),
    (0.715, 0.398), (0.665, 0.398),
    # outer lip ring 31-42 starting at left corner, clockwise
    (0.380, 0.720), (0.428, 0.694), (0.468, 0.682), (0.500, 0.678),
    (0.532, 0.682), (0.572, 0.694), (0.620, 0.720), (0.572, 0.748),
    (0.532, 0.760), (0.500, 0.764), (0.468, 0.760), (0.428, 0.748),
    # inner lip 43-48
    (0.430, 0.720), (0.468, 0.706), (0.500, 0.702), (0.532, 0.706),
    (0.570, 0.720), (0.500, 0.738),
], dtype=np.float64)


@dataclass(frozen=True)
class CenterRule:
    """Affine combination of landmark indices plus a fixed offset."""

    terms: tuple[tuple[int, float], ...]
    offset: tuple[float, float] = (0.0, 0.0)

    def evaluate(self, landmarks: np.ndarray) -> np.ndarray:
        point = np.zeros(landmarks.shape[:-2] + (2,))
        for idx, weight in self.terms:
            point = point + weight * landmarks[..., idx, :]
        return np.clip(point + np.asarray(self.offset), 0.0, 1.0)


# Region anchors on the 49-point layout. One rule per AU the supported
# datasets label; overridable through the [au_centers] config section.
DEFAULT_AU_CENTER_RULES: dict[int, CenterRule] = {
    1: CenterRule(((4, 0.5), (5, 0.5)), (0.0, -0.055)),     # inner brow
    2: CenterRule(((9, 1.0),), (0.0, -0.040)),              # outer brow
    4: CenterRule(((4, 0.5), (5, 0.5)), (0.0, -0.055)),     # brow lowerer, shares the inner-brow region with AU1
    5: CenterRule(((26, 0.5), (27, 0.5)), (0.0, -0.005)),   # upper lid
    6: CenterRule(((23, 0.5), (24, 0.5)), (0.0, 0.075)),    # cheek raiser
    7: CenterRule(((19, 1.0),), (-0.020, 0.010)),           # lid tightener
    9: CenterRule(((11, 1.0),), (0.0, 0.010)),              # nose wrinkler
    10: CenterRule(((16, 1.0),), (0.0, 0.060)),             # upper lip raiser
    12: CenterRule(((37, 1.0),), (0.100, 0.0)),             # lip corner puller
    14: CenterRule(((31, 1.0),), (-0.060, 0.0)),            # dimpler
    15: CenterRule(((37, 1.0),), (0.100, 0.0)),             # lip corner depressor, same corner region as AU12
    17: CenterRule(((40, 1.0),), (0.0, 0.070)),             # chin raiser
    23: CenterRule(((45, 1.0),)),                           # lip tightener
    24: CenterRule(((40, 1.0),), (0.0, -0.010)),            # lip pressor
    25: CenterRule(((48, 1.0),)),                           # lips part
    26: CenterRule(((40, 1.0),), (0.0, 0.040)),             # jaw drop
}


class AUCenterTable:
    def __init__(self, rules: dict[int, CenterRule] | None = None):
        self.rules = dict(DEFAULT_AU_CENTER_RULES if rules is None else rules)

    def validate(self, au_ids, landmark_count: int):
        for au in au_ids:
            if au not in self.rules:
                raise ConfigError(f"no AU-center rule for AU{au}")
            for idx, _ in self.rules[au].terms:
                if not 0 <= idx < landmark_count:
                    raise ConfigError(
                        f"AU{au} center rule references landmark {idx}, but only "
                        f"{landmark_count} landmarks are configured")

    def centers(self, landmarks: np.ndarray, au_ids) -> np.ndarray:
        """Evaluate rules on (..., L, 2) landmarks -> (..., n_au, 2) in [0,1]."""
        self.validate(au_ids, landmarks.shape[-2])
        return np.stack([self.rules[au].evaluate(landmarks) for au in au_ids], axis=-2)


@dataclass
class LandmarkSet:
    """Normalized landmark coordinates, (..., L, 2), clamped to [0,1]."""

    coords: Tensor

    @property
    def count(self) -> int:
        return self.coords.data.shape[-2]

    def numpy(self) -> np.ndarray:
        return self.coords.data


@dataclass
class AUFeatureSet:
    """Per-AU feature vectors (..., n_au, d_au) in fixed ascending-AU order."""

    vectors: Tensor
    au_ids: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.vectors.data.shape[-1]

    def replace(self, vectors: Tensor) -> "AUFeatureSet":
        return AUFeatureSet(vectors, self.au_ids)


class LandmarkHead(Module):
    """Flatten the landmark feature map into 2L sigmoid coordinates."""

    def __init__(self, in_features: int, landmark_count: int):
        super().__init__()
        self.landmark_count = landmark_count
        self.proj = Linear(in_features, 2 * landmark_count)

    def forward(self, landmark_feature: Tensor) -> LandmarkSet:
        n = landmark_feature.data.shape[0]
        flat = landmark_feature.reshape(n, -1)
        coords = self.proj(flat).sigmoid().reshape(n, self.landmark_count, 2)
        return LandmarkSet(coords)


class AURefine(Module):
    """Per-AU refinement: two conv units, 2x2 pool, linear to d_au."""

    def __init__(self, in_channels: int, crop: tuple[int, int], d_au: int):
        super().__init__()
        ch, cw = crop
        if ch % 2 or cw % 2:
            raise ConfigError(f"crop extents must be even for pooling, got {crop}")
        self.unit1 = ConvUnit(in_channels, in_channels)
        self.unit2 = ConvUnit(in_channels, in_channels)
        self.proj = Linear(in_channels * (ch // 2) * (cw // 2), d_au)

    def forward(self, window: Tensor) -> Tensor:
        x = T.max_pool2d(self.unit2(self.unit1(window)), 2)
        return self.proj(x.reshape(x.data.shape[0], -1))


def crop_window_origin(centers: np.ndarray, map_hw: tuple[int, int],
                       crop_hw: tuple[int, int]) -> np.ndarray:
    """Map normalized centers to top-left window corners, shifted to fit.

    Centers round to the nearest feature-map cell; the window never shrinks,
    it slides inside the map bounds instead.
    """
    hf, wf = map_hw
    ch, cw = crop_hw
    if ch > hf or cw > wf:
        raise ConfigError(f"crop {crop_hw} exceeds feature map {map_hw}")
    col = np.rint(centers[..., 0] * (wf - 1)).astype(int)
    row = np.rint(centers[..., 1] * (hf - 1)).astype(int)
    top = np.clip(row - ch // 2, 0, hf - ch)
    left = np.clip(col - cw // 2, 0, wf - cw)
    return np.stack([top, left], axis=-1)


class AURegionExtractor(Module):
    """Crop one window per AU from the global feature map and refine it."""

    def __init__(self, au_ids, in_channels: int, crop: tuple[int, int], d_au: int):
        super().__init__()
        self.au_ids = tuple(au_ids)
        self.crop = tuple(crop)
        self.d_au = d_au
        self.refiners = []
        for au in self.au_ids:
            refiner = AURefine(in_channels, crop, d_au)
            setattr(self, f"refine_au{au}", refiner)
            self.refiners.append(refiner)

    def forward(self, global_feature: Tensor, centers: np.ndarray) -> AUFeatureSet:
        """centers: (N, n_au, 2) normalized coordinates (not differentiated)."""
        n, _, hf, wf = global_feature.data.shape
        ch, cw = self.crop
        origins = crop_window_origin(centers, (hf, wf), self.crop)
        idx_n = np.arange(n)[:, None, None, None]
        idx_c = np.arange(global_feature.data.shape[1])[None, :, None, None]
        offs_r = np.arange(ch)[None, None, :, None]
        offs_c = np.arange(cw)[None, None, None, :]
        vectors = []
        for i in range(len(self.au_ids)):
            rows = origins[:, i, 0][:, None, None, None] + offs_r
            cols = origins[:, i, 1][:, None, None, None] + offs_c
            window = global_feature[idx_n, idx_c, rows, cols]
            vectors.append(self.refiners[i](window))
        return AUFeatureSet(T.stack(vectors, axis=1), self.au_ids)
