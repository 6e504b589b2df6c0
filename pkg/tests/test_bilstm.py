"""BiLSTM tests against an explicit per-gate recurrence oracle."""

import numpy as np

from hicomex.au_region import AUFeatureSet
from hicomex.bilstm import BiLSTM, BiLSTMConfig
from hicomex.gradcheck import grad_check
from hicomex.rng import SplitRng
from hicomex.tensor import Tensor


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_oracle(xs, w_x, w_h, bias, hidden):
    """Step-by-step single-direction recurrence written against the gate math."""
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    outs = []
    for x in xs:
        gates = w_x @ x + w_h @ h + bias
        i = _sigmoid(gates[0 * hidden:1 * hidden])
        f = _sigmoid(gates[1 * hidden:2 * hidden])
        g = np.tanh(gates[2 * hidden:3 * hidden])
        o = _sigmoid(gates[3 * hidden:4 * hidden])
        c = f * c + i * g
        h = o * np.tanh(c)
        outs.append(h.copy())
    return outs


def bilstm_oracle(xs, module):
    """Full bidirectional pass + projection + residual, one sample."""
    fw, bw, proj = module.forward_cell, module.backward_cell, module.proj
    hidden = fw.hidden_dim
    h_f = lstm_oracle(xs, fw.w_x.data, fw.w_h.data, fw.bias.data, hidden)
    h_b = lstm_oracle(list(reversed(xs)), bw.w_x.data, bw.w_h.data, bw.bias.data,
                      hidden)
    h_b = list(reversed(h_b))
    outs = []
    for t, x in enumerate(xs):
        cat = np.concatenate([h_f[t], h_b[t]])
        outs.append(x + proj.weight.data @ cat + proj.bias.data)
    return np.stack(outs)


def run(module, x):
    return module(AUFeatureSet(Tensor(x), tuple(range(x.shape[1])))).vectors.data


class TestBiLSTM:
    def test_zero_parameters_collapse_to_identity(self):
        m = BiLSTM(BiLSTMConfig(d_au=6, hidden=5))
        for p in m.parameters():
            p.data = np.zeros_like(p.data)
        x = np.random.default_rng(0).normal(size=(2, 4, 6))
        # the recurrence collapses (tanh(0)*sigmoid(0) chain), leaving the
        # residual input untouched
        assert np.array_equal(run(m, x), x)
        h = m.forward_cell.run([Tensor(x[:, t]) for t in range(4)])
        assert all(np.allclose(ht.data, 0.0) for ht in h)

    def test_length_one_sequence(self):
        m = BiLSTM(BiLSTMConfig(d_au=6, hidden=5)).init_params(SplitRng(1))
        x = np.random.default_rng(2).normal(size=(3, 1, 6))
        got = run(m, x)
        want = np.stack([bilstm_oracle([x[i, 0]], m) for i in range(3)])
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_matches_recurrence_oracle(self):
        m = BiLSTM(BiLSTMConfig(d_au=8, hidden=8)).init_params(SplitRng(3))
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.normal(size=(2, 4, 8))
            got = run(m, x)
            want = np.stack([bilstm_oracle(list(x[i]), m) for i in range(2)])
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_reversal_symmetry_exact(self):
        cfg = BiLSTMConfig(d_au=8, hidden=8)
        m = BiLSTM(cfg).init_params(SplitRng(5))
        swapped = BiLSTM(cfg)
        swapped.forward_cell.load_state_dict(m.backward_cell.state_dict())
        swapped.backward_cell.load_state_dict(m.forward_cell.state_dict())
        # swapping directions also swaps the two halves of the projection
        h = cfg.hidden
        w = m.proj.weight.data
        swapped.proj.weight.data = np.concatenate([w[:, h:], w[:, :h]], axis=1)
        swapped.proj.bias.data = m.proj.bias.data.copy()

        x = np.random.default_rng(6).normal(size=(2, 5, 8))
        out = run(m, x)
        out_rev = run(swapped, x[:, ::-1].copy())
        assert np.array_equal(out_rev, out[:, ::-1])

    def test_every_position_influences_every_output(self):
        m = BiLSTM(BiLSTMConfig(d_au=8, hidden=8)).init_params(SplitRng(7))
        x = np.random.default_rng(8).normal(size=(1, 4, 8))
        for out_pos in range(4):
            xt = Tensor(x.copy(), requires_grad=True)
            out = m(AUFeatureSet(xt, (1, 2, 3, 4))).vectors
            out[:, out_pos].sum().backward()
            per_input = np.abs(xt.grad[0]).sum(axis=1)
            assert np.all(per_input > 0), f"output {out_pos} misses an input"

    def test_gradcheck(self):
        m = BiLSTM(BiLSTMConfig(d_au=4, hidden=4)).init_params(SplitRng(9))
        x = np.random.default_rng(10).normal(size=(1, 3, 4))

        def f(t):
            return (run_tensor(m, t) ** 2).sum()

        def run_tensor(module, t):
            return module(AUFeatureSet(t, (1, 2, 3))).vectors

        assert grad_check(f, Tensor(x)) < 1e-6
