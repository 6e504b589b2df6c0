"""Model assembly and loss tests."""

import numpy as np
import pytest

from hicomex.attention import AttentionConfig
from hicomex.au_region import LandmarkSet
from hicomex.backbone import BackboneConfig
from hicomex.bilstm import BiLSTMConfig
from hicomex.errors import DataError
from hicomex.hopfield import HopfieldConfig
from hicomex.model import (AUDetector, ModelConfig, au_loss, landmark_loss,
                           total_loss)
from hicomex.rng import SplitRng
from hicomex.tensor import Tensor
from hicomex.verify import tiny_model


def make_model(seed=0, **overrides):
    cfg, table = tiny_model()
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return AUDetector(cfg, table).init_params(SplitRng(seed)), cfg


class TestForward:
    def test_output_shapes(self):
        model, cfg = make_model()
        model.eval()
        out = model(Tensor(np.random.default_rng(0).random((2, 1, 16, 16))))
        assert out.probs.data.shape == (2, 3)
        assert out.landmarks.coords.data.shape == (2, 4, 2)
        assert out.au_features.vectors.data.shape == (2, 3, 6)
        assert out.centers.shape == (2, 3, 2)

    def test_probabilities_in_open_interval(self):
        model, _ = make_model()
        model.eval()
        out = model(Tensor(np.random.default_rng(1).random((4, 1, 16, 16))))
        assert np.all(out.probs.data > 0) and np.all(out.probs.data < 1)

    def test_zero_head_gives_half(self):
        model, _ = make_model()
        model.au_head.weight.data = np.zeros_like(model.au_head.weight.data)
        model.au_head.bias.data = np.zeros_like(model.au_head.bias.data)
        model.eval()
        out = model(Tensor(np.random.default_rng(2).random((2, 1, 16, 16))))
        assert np.allclose(out.probs.data, 0.5)

    def test_switch_combinations(self):
        x = Tensor(np.random.default_rng(3).random((1, 1, 16, 16)))
        outputs = {}
        for switches in [(False, False, False), (True, False, False),
                         (False, True, False), (False, False, True),
                         (True, True, True)]:
            model, _ = make_model(use_bilstm=switches[0],
                                  use_attention=switches[1],
                                  use_hopfield=switches[2])
            model.eval()
            outputs[switches] = model(x).probs.data
        # all-off must differ from each relation-enabled variant
        base = outputs[(False, False, False)]
        for key, probs in outputs.items():
            if key != (False, False, False):
                assert not np.array_equal(base, probs)

    def test_disabled_relations_match_bypass(self):
        model, _ = make_model()
        model.eval()
        x = Tensor(np.random.default_rng(4).random((1, 1, 16, 16)))
        bypass = model(x, use_relations=False).probs.data
        off_model, _ = make_model(use_bilstm=False, use_attention=False,
                                  use_hopfield=False)
        shared = {k: v for k, v in model.state_dict().items()
                  if not k.startswith(("bilstm", "attention", "hopfield"))}
        off_model.load_state_dict(shared)
        off_model.eval()
        assert np.array_equal(off_model(x).probs.data, bypass)

    def test_gradient_reaches_patch_params_from_landmark_loss(self):
        model, cfg = make_model()
        model.train()
        x = Tensor(np.random.default_rng(5).random((2, 1, 16, 16)))
        out = model(x, rng=SplitRng(6), use_relations=True)
        truth = np.random.default_rng(7).random((2, 4, 2))
        landmark_loss(out.landmarks, truth).backward()
        grad = model.backbone.patch.shared.conv.weight.grad
        assert grad is not None and np.abs(grad).max() > 0

    def test_freeze_features_blocks_backbone_grads(self):
        model, cfg = make_model()
        model.train()
        model.backbone.eval()
        model.extractor.eval()
        x = Tensor(np.random.default_rng(8).random((2, 1, 16, 16)))
        out = model(x, rng=SplitRng(9), use_relations=True, freeze_features=True)
        labels = np.random.default_rng(10).integers(0, 2, (2, 3))
        lms = np.random.default_rng(11).random((2, 4, 2))
        total_loss(out, labels, lms, cfg.lambda_lm).backward()
        assert model.backbone.patch.shared.conv.weight.grad is None
        for refiner in model.extractor.refiners:
            assert refiner.proj.weight.grad is None
        assert model.au_head.weight.grad is not None
        assert model.landmark_head.proj.weight.grad is not None
        assert model.bilstm.proj.weight.grad is not None


class TestLosses:
    def test_au_loss_perfect_prediction_near_zero(self):
        labels = np.array([[1.0, 0.0, 1.0]])
        probs = Tensor(labels.copy())
        assert au_loss(probs, labels).item() < 1e-6

    def test_au_loss_half_is_ln2(self):
        labels = np.array([[1, 0, 1, 0]], dtype=float)
        probs = Tensor(np.full((1, 4), 0.5))
        assert abs(au_loss(probs, labels).item() - np.log(2.0)) < 1e-12

    def test_au_loss_symmetry(self):
        rng = np.random.default_rng(12)
        p = rng.random((3, 5)) * 0.9 + 0.05
        y = rng.integers(0, 2, (3, 5)).astype(float)
        a = au_loss(Tensor(p), y).item()
        b = au_loss(Tensor(1.0 - p), 1.0 - y).item()
        assert abs(a - b) < 1e-12

    def test_au_loss_rejects_bad_labels(self):
        with pytest.raises(DataError):
            au_loss(Tensor(np.full((1, 2), 0.5)), np.array([[0.0, 2.0]]))

    def test_landmark_loss_zero_and_offset(self):
        truth = np.random.default_rng(13).random((2, 5, 2))
        pred = LandmarkSet(Tensor(truth.copy()))
        assert landmark_loss(pred, truth).item() == 0.0
        shifted = LandmarkSet(Tensor(truth + [0.1, 0.0]))
        assert abs(landmark_loss(shifted, truth).item() - 0.01) < 1e-12

    def test_lambda_zero_reduces_to_au_loss(self):
        model, cfg = make_model()
        model.eval()
        x = Tensor(np.random.default_rng(14).random((2, 1, 16, 16)))
        out = model(x)
        labels = np.random.default_rng(15).integers(0, 2, (2, 3))
        lms = np.random.default_rng(16).random((2, 4, 2))
        combined = total_loss(out, labels, lms, 0.0).item()
        assert combined == au_loss(out.probs, labels).item()

    def test_landmark_count_mismatch(self):
        pred = LandmarkSet(Tensor(np.zeros((1, 5, 2))))
        with pytest.raises(DataError):
            landmark_loss(pred, np.zeros((1, 6, 2)))
