"""Hopfield tests: retrieval fixed point, attention reduction, entropy."""

import numpy as np
import pytest

from hicomex.attention import AttentionConfig, SelfAttentionEncoder
from hicomex.au_region import AUFeatureSet
from hicomex.errors import ConfigError
from hicomex.gradcheck import grad_check
from hicomex.hopfield import HopfieldConfig, HopfieldEncoder, hopfield_update
from hicomex.rng import SplitRng
from hicomex.tensor import Tensor


def orthogonal_patterns(d=8):
    """Two unit-norm orthogonal patterns stored as both keys and values."""
    p1 = np.zeros(d)
    p2 = np.zeros(d)
    p1[0] = 1.0
    p2[1] = 1.0
    return np.stack([p1, p2])


def iterate(state, k, v, beta, steps):
    states = [np.asarray(state)]
    for _ in range(steps):
        new = hopfield_update(Tensor(states[-1]), Tensor(k), Tensor(v), beta)
        states.append(new.data)
    return states


class TestHopfieldUpdate:
    def test_beta_zero_gives_column_mean(self):
        rng = np.random.default_rng(0)
        k = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 3))
        state = rng.normal(size=(2, 4))
        out = hopfield_update(Tensor(state), Tensor(k), Tensor(v), beta=0.0)
        assert np.allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)

    def test_single_stored_pattern(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(1, 6))
        out = hopfield_update(Tensor(rng.normal(size=(3, 4))),
                              Tensor(rng.normal(size=(1, 4))), Tensor(v), beta=3.0)
        assert np.allclose(out.data, np.tile(v, (3, 1)), atol=1e-15)

    def test_retrieval_converges_to_stored_value(self):
        patterns = orthogonal_patterns()
        noisy = patterns[0] + 0.1  # query near pattern 1
        states = iterate(noisy[None], patterns, patterns, beta=50.0, steps=5)
        final = states[-1][0]
        cos = final @ patterns[0] / (np.linalg.norm(final) + 1e-12)
        assert cos > 0.99
        assert np.abs(states[5] - states[4]).max() < 1e-6

    def test_entropy_nonincreasing_on_fixture(self):
        patterns = orthogonal_patterns()
        state = (patterns[0] + 0.25)[None]
        entropies = []
        for _ in range(5):
            logits = 50.0 * state @ patterns.T / np.sqrt(patterns.shape[1])
            p = np.exp(logits - logits.max())
            p /= p.sum()
            entropies.append(float(-(p * np.log(p + 1e-300)).sum()))
            state = hopfield_update(Tensor(state), Tensor(patterns),
                                    Tensor(patterns), 50.0).data
        assert all(entropies[i + 1] <= entropies[i] + 1e-12 for i in range(4))


def matching_configs(update_steps=1, beta=1.0):
    attn = AttentionConfig(d=8, d_k=4, d_v=4, n_heads=2, n_layers=1, dropout=0.0)
    hop = HopfieldConfig(d=8, d_k=4, d_v=4, n_heads=2, n_layers=1, dropout=0.0,
                         update_steps=update_steps, beta=beta,
                         convergence_epsilon=1e-12)
    return attn, hop


class TestHopfieldEncoder:
    def test_single_step_bit_identical_to_attention(self):
        attn_cfg, hop_cfg = matching_configs(update_steps=1, beta=1.0)
        attn = SelfAttentionEncoder(6, 4, attn_cfg).init_params(SplitRng(2)).eval()
        hop = HopfieldEncoder(6, 4, hop_cfg)
        hop.load_state_dict(attn.state_dict())
        hop.eval()

        x = AUFeatureSet(Tensor(np.random.default_rng(3).normal(size=(2, 4, 6))),
                         (1, 2, 3, 4))
        assert np.array_equal(attn(x).vectors.data, hop(x).vectors.data)

    def test_early_stopping_records_steps(self):
        _, hop_cfg = matching_configs(update_steps=8, beta=50.0)
        hop_cfg.convergence_epsilon = 1e-4
        hop = HopfieldEncoder(6, 4, hop_cfg).init_params(SplitRng(4)).eval()
        # values == keys makes the iteration a contraction onto stored patterns
        hop.layer0.w_v.load_state_dict(hop.layer0.w_k.state_dict())
        x = AUFeatureSet(Tensor(np.random.default_rng(5).normal(size=(1, 4, 6))),
                         (1, 2, 3, 4))
        hop(x)
        assert 1 <= hop.layer0.executed_steps < 8

    def test_gradcheck_two_step_toy(self):
        hop_cfg = HopfieldConfig(d=4, d_k=2, d_v=2, n_heads=2, n_layers=1,
                                 dropout=0.0, update_steps=2, beta=1.5,
                                 convergence_epsilon=1e-12)
        hop = HopfieldEncoder(4, 3, hop_cfg).init_params(SplitRng(6)).eval()
        x = np.random.default_rng(7).normal(size=(1, 3, 4))

        def f(t):
            return (hop(AUFeatureSet(t, (1, 2, 3))).vectors ** 2).sum()

        assert hop.layer0.update_steps == 2
        assert grad_check(f, Tensor(x)) < 1e-5
        hop(AUFeatureSet(Tensor(x), (1, 2, 3)))
        assert hop.layer0.executed_steps == 2

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            HopfieldConfig(update_steps=0)
        with pytest.raises(ConfigError):
            HopfieldConfig(update_steps=33)
        with pytest.raises(ConfigError):
            HopfieldConfig(beta=0.0)
        with pytest.raises(ConfigError):
            HopfieldConfig(d=8, d_k=2, d_v=4, n_heads=2)
