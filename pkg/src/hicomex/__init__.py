"""Facial action-unit detector with relation learning over local AU features."""

from .attention import (AttentionConfig, SelfAttentionEncoder,
                        positional_encoding, self_attention)
from .au_region import AUCenterTable, AUFeatureSet, LandmarkSet
from .backbone import Backbone, BackboneConfig
from .bilstm import BiLSTM, BiLSTMConfig
from .config import RunConfig
from .data import (Manifest, Sample, SyntheticSpec, binarize_intensity,
                   f1_per_au, generate_synthetic, kfold_subject_exclusive)
from .gradcheck import grad_check
from .hopfield import HopfieldConfig, HopfieldEncoder, hopfield_update
from .model import AUDetector, ModelConfig, au_loss, landmark_loss, total_loss
from .rng import SplitRng
from .tensor import Tensor, no_grad
from .train import TrainConfig, Trainer, evaluate

__version__ = "0.1.0"
