"""Numerical verification suite behind the gradcheck command.

Runs finite-difference checks over every primitive and over a tiny
end-to-end model instance, comparing against the recorded backward rules.
Primitives must agree to 1e-6, relation stacks to 1e-5, and the full
training loss to 1e-4; any violation raises NumericalCheckError.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, SelfAttentionEncoder
from .au_region import AUCenterTable, AUFeatureSet, CenterRule
from .backbone import BackboneConfig
from .bilstm import BiLSTM, BiLSTMConfig
from .errors import NumericalCheckError
from .gradcheck import grad_check
from .hopfield import HopfieldConfig, HopfieldEncoder
from .model import AUDetector, ModelConfig, total_loss
from .rng import SplitRng
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
STACK_TOL = 1e-5
FULL_MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def tiny_model() -> tuple[ModelConfig, AUCenterTable]:
    """A complete but minimal instance: every module present, tiny shapes."""
    table = AUCenterTable({
        1: CenterRule(((0, 0.5), (1, 0.5)), (0.0, -0.05)),
        2: CenterRule(((2, 1.0),)),
        3: CenterRule(((3, 1.0),), (0.05, 0.05)),
    })
    cfg = ModelConfig(
        backbone=BackboneConfig(input_size=(16, 16), input_channels=1,
                                patch_grid=(1, 2), patch_channels=3,
                                featconv_channels=[4, 4]),
        au_ids=(1, 2, 3),
        landmark_count=4,
        d_au=6,
        crop=(2, 2),
        bilstm=BiLSTMConfig(d_au=6, hidden=6),
        attention=AttentionConfig(d=4, d_k=2, d_v=2, n_heads=2, n_layers=1,
                                  dropout=0.1),
        hopfield=HopfieldConfig(d=4, d_k=2, d_v=2, n_heads=2, n_layers=1,
                                dropout=0.1, update_steps=2, beta=1.5,
                                convergence_epsilon=1e-12),
    )
    return cfg, table


def check_primitives(seed: int, n_seeds: int = 10) -> list[CheckResult]:
    results = []
    worst = {}
    for trial in range(n_seeds):
        rng = np.random.default_rng(seed * 1000 + trial)
        crng = np.random.default_rng(trial)
        x4 = Tensor(rng.normal(size=(2, 3, 6, 6)))
        kernel = Tensor(rng.normal(size=(4, 3, 3, 3)))
        kbias = Tensor(rng.normal(size=4))
        pool_w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        soft_w = Tensor(rng.normal(size=(36, 6)))
        mat_w = Tensor(rng.normal(size=(18, 4)))
        lin_w = Tensor(rng.normal(size=(5, 18)))
        lin_b = Tensor(rng.normal(size=5))
        slope = Tensor(np.array([0.3, 0.5, 0.7]))
        mask = Tensor((SplitRng(trial, ("mask",)).random((2, 3, 6, 6)) >= 0.3) / 0.7)

        cases = {
            "conv2d": lambda t: (T.conv2d(t, kernel, kbias, stride=2,
                                          padding=1) ** 2).sum(),
            "max_pool2d": lambda t: (T.max_pool2d(t, 2) * pool_w).sum(),
            "softmax": lambda t: (T.softmax(t.reshape(36, 6), axis=-1)
                                  * soft_w).sum(),
            "sigmoid": lambda t: (t.sigmoid() ** 2).sum(),
            "tanh": lambda t: (t.tanh() * 0.5).sum(),
            "prelu": lambda t: (T.prelu(t, slope) ** 2).sum(),
            "linear": lambda t: (T.linear(t.reshape(12, 18), lin_w, lin_b)
                                 ** 2).sum(),
            "matmul": lambda t: ((t.reshape(12, 18) @ mat_w) ** 2).sum(),
            "dropout_fixed_mask": lambda t: ((t * mask) ** 2).sum(),
            "concat": lambda t: (T.concat([t, t * 2.0], axis=1) ** 2).sum(),
            "mean": lambda t: (t.mean(axis=(2, 3)) ** 2).sum(),
        }
        for name, f in cases.items():
            err = grad_check(f, Tensor(x4.data.copy()), max_coords=12,
                             coord_rng=crng)
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        results.append(CheckResult(f"primitive/{name}", err, PRIMITIVE_TOL, 12 * n_seeds))
    return results


def check_relation_stacks(seed: int) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)

    bilstm = BiLSTM(BiLSTMConfig(d_au=4, hidden=4)).init_params(SplitRng(seed, ("b",)))
    x = Tensor(rng.normal(size=(1, 3, 4)))
    err = grad_check(
        lambda t: (bilstm(AUFeatureSet(t, (1, 2, 3))).vectors ** 2).sum(), x)
    results.append(CheckResult("module/bilstm", err, STACK_TOL, x.size))

    attn = SelfAttentionEncoder(
        4, 3, AttentionConfig(d=4, d_k=2, d_v=2, n_heads=2, n_layers=2,
                              dropout=0.0)).init_params(SplitRng(seed, ("a",))).eval()
    x = Tensor(rng.normal(size=(1, 3, 4)))
    err = grad_check(
        lambda t: (attn(AUFeatureSet(t, (1, 2, 3))).vectors ** 2).sum(), x)
    results.append(CheckResult("module/attention", err, STACK_TOL, x.size))

    hop = HopfieldEncoder(
        4, 3, HopfieldConfig(d=4, d_k=2, d_v=2, n_heads=2, n_layers=1,
                             dropout=0.0, update_steps=2, beta=1.5,
                             convergence_epsilon=1e-12)
    ).init_params(SplitRng(seed, ("h",))).eval()
    x = Tensor(rng.normal(size=(1, 3, 4)))
    err = grad_check(
        lambda t: (hop(AUFeatureSet(t, (1, 2, 3))).vectors ** 2).sum(), x)
    results.append(CheckResult("module/hopfield", err, STACK_TOL, x.size))
    return results


class _FrozenCenters:
    """Pin crop windows to their unperturbed cells during finite differences.

    Window placement rounds to feature-map cells, so it is piecewise
    constant: the backward pass treats it as fixed, and the numeric oracle
    must evaluate the same branch (as with dropout masks and pooling ties).
    """

    def __init__(self, table):
        self.table = table
        self.cache = None

    def validate(self, au_ids, landmark_count):
        self.table.validate(au_ids, landmark_count)

    def centers(self, landmarks, au_ids):
        if self.cache is None:
            self.cache = self.table.centers(landmarks, au_ids)
        return self.cache


def check_full_model(seed: int, coords_per_param: int = 5) -> list[CheckResult]:
    """Finite differences through the complete training loss, per parameter."""
    cfg, table = tiny_model()
    model = AUDetector(cfg, table).init_params(SplitRng(seed, ("model",)))
    model.center_table = _FrozenCenters(model.center_table)
    rng = np.random.default_rng(seed)
    images = Tensor(rng.normal(size=(2, 1, 16, 16)) * 0.3 + 0.5)
    labels = rng.integers(0, 2, (2, 3))
    landmarks = rng.random((2, 4, 2))

    def loss_fn(_ignored=None):
        model.train()
        out = model(images, rng=SplitRng(seed, ("fwd",)), use_relations=True)
        return total_loss(out, labels, landmarks, cfg.lambda_lm)

    ladder = (1e-6, 1e-7, 1e-3)
    worst, total = 0.0, 0
    crng = np.random.default_rng(seed + 7)
    for name, p in model.named_parameters():
        err = grad_check(loss_fn, p, max_coords=coords_per_param, coord_rng=crng,
                         retry_eps=ladder)
        worst = max(worst, err)
        total += min(coords_per_param, p.size)
    result = [CheckResult("full_model/parameters", worst, FULL_MODEL_TOL, total)]

    err = grad_check(loss_fn, images, max_coords=40, coord_rng=crng,
                     retry_eps=ladder)
    result.append(CheckResult("full_model/input", err, FULL_MODEL_TOL, 40))
    return result


def run_gradcheck(seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.time()
    results = (check_primitives(seed) + check_relation_stacks(seed)
               + check_full_model(seed))
    return results, time.time() - start


def format_report(results: list[CheckResult], elapsed: float, seed: int) -> str:
    lines = [f"gradient check report (seed={seed})"]
    for r in results:
        status = "ok " if r.passed else "FAIL"
        lines.append(f"  [{status}] {r.name:<28} max_err={r.max_error:.3e} "
                     f"tol={r.tolerance:.0e} coords={r.coords}")
    lines.append(f"elapsed: {elapsed:.1f}s")
    return "\n".join(lines)


def assert_all_passed(results: list[CheckResult]):
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_error / r.tolerance)
        raise NumericalCheckError(
            f"{len(failed)} gradient check(s) failed; worst: {worst.name} "
            f"max_err={worst.max_error:.3e} tol={worst.tolerance:.0e}")
