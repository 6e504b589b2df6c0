"""Full detector: backbone, AU regions, relation modules, prediction heads.

Relation modules apply in the fixed order BiLSTM -> self-attention ->
Hopfield, each optional via config switches so every ablation variant is one
configuration away. The occurrence head reads the flattened global and
landmark feature maps concatenated with all refined AU vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, SelfAttentionEncoder
from .au_region import (AUCenterTable, AUFeatureSet, AURegionExtractor,
                        LandmarkHead, LandmarkSet)
from .backbone import Backbone, BackboneConfig
from .bilstm import BiLSTM, BiLSTMConfig
from .errors import ConfigError, DataError
from .hopfield import HopfieldConfig, HopfieldEncoder
from .nn import Linear, Module
from .rng import SplitRng
from .tensor import Tensor

BP4D_AUS = (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24)
DISFA_AUS = (1, 2, 4, 6, 9, 12, 25, 26)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    au_ids: tuple[int, ...] = BP4D_AUS
    landmark_count: int = 49
    d_au: int = 64
    crop: tuple[int, int] = (6, 6)
    use_bilstm: bool = True
    use_attention: bool = True
    use_hopfield: bool = True
    bilstm: BiLSTMConfig = field(default_factory=BiLSTMConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    hopfield: HopfieldConfig = field(default_factory=HopfieldConfig)
    lambda_lm: float = 0.5

    def __post_init__(self):
        self.au_ids = tuple(self.au_ids)
        if tuple(sorted(self.au_ids)) != self.au_ids:
            raise ConfigError(f"AU ids must be in ascending order, got {self.au_ids}")
        if self.lambda_lm < 0:
            raise ConfigError(f"lambda_lm must be >= 0, got {self.lambda_lm}")
        if self.bilstm.d_au != self.d_au:
            raise ConfigError("bilstm.d_au must match model d_au")


@dataclass
class ModelOutput:
    probs: Tensor                 # (N, n_au) occurrence probabilities
    landmarks: LandmarkSet        # predicted coordinates, (N, L, 2)
    au_features: AUFeatureSet     # after relation modules
    centers: np.ndarray           # (N, n_au, 2) crop centers used


class AUDetector(Module):
    def __init__(self, cfg: ModelConfig, center_table: AUCenterTable | None = None):
        super().__init__()
        self.cfg = cfg
        self.center_table = center_table or AUCenterTable()
        self.center_table.validate(cfg.au_ids, cfg.landmark_count)

        self.backbone = Backbone(cfg.backbone)
        hh, hw = cfg.backbone.head_spatial
        head_feat = cfg.backbone.head_channels * hh * hw
        self.landmark_head = LandmarkHead(head_feat, cfg.landmark_count)
        self.extractor = AURegionExtractor(
            cfg.au_ids, cfg.backbone.head_channels, cfg.crop, cfg.d_au)
        n_au = len(cfg.au_ids)
        if cfg.use_bilstm:
            self.bilstm = BiLSTM(cfg.bilstm)
        if cfg.use_attention:
            self.attention = SelfAttentionEncoder(cfg.d_au, n_au, cfg.attention)
        if cfg.use_hopfield:
            self.hopfield = HopfieldEncoder(cfg.d_au, n_au, cfg.hopfield)
        self.au_head = Linear(2 * head_feat + n_au * cfg.d_au, n_au)

    def feature_module_names(self) -> tuple[str, ...]:
        """Submodules whose parameters stage 2 freezes."""
        return ("backbone", "extractor")

    def apply_relations(self, aus: AUFeatureSet,
                        rng: SplitRng | None = None) -> AUFeatureSet:
        if self.cfg.use_bilstm:
            aus = self.bilstm(aus)
        if self.cfg.use_attention:
            aus = self.attention(aus, rng.child("attention") if rng else None)
        if self.cfg.use_hopfield:
            aus = self.hopfield(aus, rng.child("hopfield") if rng else None)
        return aus

    def forward(self, images: Tensor, rng: SplitRng | None = None,
                use_relations: bool = True,
                freeze_features: bool = False) -> ModelOutput:
        """Run the full pipeline.

        ``use_relations=False`` bypasses the relation modules (stage-1 graph).
        ``freeze_features=True`` evaluates backbone and region extraction
        without recording gradients, for stage-2 training.
        """
        if freeze_features:
            with T.no_grad():
                global_f, landmark_f = self.backbone(images)
        else:
            global_f, landmark_f = self.backbone(images)

        landmarks = self.landmark_head(landmark_f)
        centers = self.center_table.centers(landmarks.numpy(), self.cfg.au_ids)

        if freeze_features:
            with T.no_grad():
                aus = self.extractor(global_f, centers)
            aus = aus.replace(aus.vectors.detach())
        else:
            aus = self.extractor(global_f, centers)

        if use_relations:
            aus = self.apply_relations(aus, rng)

        n = images.data.shape[0]
        head_in = T.concat([
            global_f.reshape(n, -1),
            landmark_f.reshape(n, -1),
            aus.vectors.reshape(n, -1),
        ], axis=-1)
        probs = self.au_head(head_in).sigmoid()
        return ModelOutput(probs, landmarks, aus, centers)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def au_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over AUs (and batch), clamped probabilities."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probs.data.shape:
        raise DataError(
            f"label shape {labels.shape} does not match predictions {probs.shape}")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DataError("AU labels must be 0 or 1")
    p = probs.clip(1e-7, 1.0 - 1e-7)
    y = Tensor(labels)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def landmark_loss(pred: LandmarkSet, truth: np.ndarray) -> Tensor:
    """Mean squared Euclidean distance in normalized coordinates."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != pred.coords.data.shape:
        raise DataError(
            f"landmark truth shape {truth.shape} does not match prediction "
            f"{pred.coords.shape}")
    diff = pred.coords - Tensor(truth)
    return (diff * diff).sum(axis=-1).mean()


def total_loss(output: ModelOutput, labels: np.ndarray, landmarks: np.ndarray,
               lambda_lm: float) -> Tensor:
    loss = au_loss(output.probs, labels)
    if lambda_lm > 0:
        loss = loss + lambda_lm * landmark_loss(output.landmarks, landmarks)
    return loss
