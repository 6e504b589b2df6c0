"""Two-stage training protocol, epoch loop, checkpointing, evaluation.

Stage 1 trains the whole pipeline with relation modules bypassed. Stage 2
freezes the feature extractors (backbone and per-AU refinement), switches
them to eval mode so stored batch-norm statistics stay fixed, and trains the
relation modules together with the occurrence and landmark heads. All
shuffling and dropout streams are keyed by (seed, stage, epoch), so resuming
from an epoch checkpoint replays the exact trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import (load_checkpoint, load_sidecar, save_checkpoint,
                         save_sidecar)
from .data import Sample, f1_per_au
from .errors import CheckpointError, ConfigError
from .model import AUDetector, total_loss
from .optim import SGD, schedule_lr
from .rng import SplitRng
from .tensor import Tensor

RELATION_PREFIXES = ("bilstm", "attention", "hopfield")
STAGE2_TRAINED = RELATION_PREFIXES + ("au_head", "landmark_head")


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_stage2: float | None = None  # stage-2 restart rate; None reuses lr
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.3
    lr_decay_every: int = 2
    epochs_stage1: int = 6
    epochs_stage2: int = 6
    batch_size: int = 16
    eval_subset: int = 256

    def epochs(self, stage: int) -> int:
        return self.epochs_stage1 if stage == 1 else self.epochs_stage2

    def base_lr(self, stage: int) -> float:
        if stage == 2 and self.lr_stage2 is not None:
            return self.lr_stage2
        return self.lr


def batches(samples: list[Sample], order, batch_size: int):
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        images = Tensor(np.stack([s.image for s in chunk]))
        labels = np.stack([s.au_labels for s in chunk])
        landmarks = np.stack([s.landmarks for s in chunk])
        yield images, labels, landmarks


def predict_probs(model: AUDetector, samples: list[Sample],
                  batch_size: int = 64) -> np.ndarray:
    model.eval()
    outputs = []
    with T.no_grad():
        for images, _, _ in batches(samples, range(len(samples)), batch_size):
            outputs.append(model(images).probs.data)
    return np.concatenate(outputs, axis=0)


def evaluate(model: AUDetector, samples: list[Sample], batch_size: int = 64):
    probs = predict_probs(model, samples, batch_size)
    labels = np.stack([s.au_labels for s in samples])
    return f1_per_au((probs > 0.5).astype(np.int64), labels)


def stage_param_names(model: AUDetector, stage: int) -> list[str]:
    names = [name for name, _ in model.named_parameters()]
    if stage == 1:
        return [n for n in names if not n.startswith(RELATION_PREFIXES)]
    return [n for n in names if n.startswith(STAGE2_TRAINED)]


def frozen_param_names(model: AUDetector, stage: int) -> list[str]:
    if stage == 1:
        return []
    roots = model.feature_module_names()
    return [name for name, _ in model.named_parameters() if name.startswith(roots)]


class Trainer:
    def __init__(self, model: AUDetector, cfg: TrainConfig,
                 train_samples: list[Sample],
                 eval_samples: list[Sample] | None = None,
                 seed: int = 0, out_dir=None, config_digest: str = "",
                 log_fn=print):
        self.model = model
        self.cfg = cfg
        self.train_samples = train_samples
        self.eval_samples = eval_samples if eval_samples else train_samples
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir else None
        self.config_digest = config_digest
        self.log_fn = log_fn
        self.rng = SplitRng(seed, ("train",))
        self.history: list[dict] = []

    # -- persistence ----------------------------------------------------

    def _paths(self, stage: int):
        return (self.out_dir / f"stage{stage}.hcmx",
                self.out_dir / f"stage{stage}.json")

    def save(self, stage: int, epoch_done: int, opt: SGD, lr: float):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        ckpt, sidecar = self._paths(stage)
        entries = dict(self.model.state_dict())
        entries.update(opt.state_entries())
        save_checkpoint(ckpt, self.config_digest, entries)
        save_sidecar(sidecar, {
            "config_digest": self.config_digest,
            "stage": stage,
            "epochs_completed": epoch_done + 1,
            "lr": lr,
            "seed": self.seed,
            "frozen": frozen_param_names(self.model, stage),
            "history": self.history,
        })

    def load_stage_checkpoint(self, stage: int):
        ckpt, sidecar = self._paths(stage)
        if not ckpt.exists():
            raise CheckpointError(
                f"stage {stage} checkpoint {ckpt} not found; run stage {stage} first")
        digest, entries = load_checkpoint(ckpt)
        if digest != self.config_digest:
            raise CheckpointError(
                f"checkpoint config digest {digest[:12]}… does not match the "
                f"active config {self.config_digest[:12]}…")
        model_state = {k: v for k, v in entries.items()
                       if not k.startswith("momentum/")}
        self.model.load_state_dict(model_state)
        return entries, load_sidecar(sidecar)

    # -- training -------------------------------------------------------

    def _set_modes(self, stage: int):
        self.model.train()
        if stage == 2:
            for name in self.model.feature_module_names():
                getattr(self.model, name).eval()

    def run_stage(self, stage: int, start_epoch: int = 0,
                  opt_state: dict | None = None):
        cfg = self.cfg
        named = dict(self.model.named_parameters())
        opt = SGD([(n, named[n]) for n in stage_param_names(self.model, stage)],
                  lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        if opt_state:
            opt.load_state_entries(opt_state)

        n_eval = min(cfg.eval_subset, len(self.eval_samples))
        eval_subset = self.eval_samples[:n_eval]

        for epoch in range(start_epoch, cfg.epochs(stage)):
            lr = schedule_lr(cfg.base_lr(stage), epoch, cfg.lr_decay,
                             cfg.lr_decay_every)
            opt.lr = lr
            self._set_modes(stage)
            order = self.rng.child("shuffle", stage, epoch).permutation(
                len(self.train_samples))
            total, seen = 0.0, 0
            for b, (images, labels, landmarks) in enumerate(
                    batches(self.train_samples, order, cfg.batch_size)):
                drop_rng = self.rng.child("dropout", stage, epoch, b)
                out = self.model(images, rng=drop_rng,
                                 use_relations=(stage == 2),
                                 freeze_features=(stage == 2))
                loss = total_loss(out, labels, landmarks, self.model.cfg.lambda_lm)
                loss.assert_finite("training loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                n = images.data.shape[0]
                total += loss.item() * n
                seen += n
            train_loss = total / seen
            _, macro = evaluate(self.model, eval_subset, cfg.batch_size)
            record = {"stage": stage, "epoch": epoch, "lr": lr,
                      "train_loss": train_loss, "eval_macro_f1": macro}
            self.history.append(record)
            self.log_fn(f"{epoch}\t{stage}\t{lr:.6g}\t{train_loss:.6f}\t{macro:.4f}")
            self.save(stage, epoch, opt, lr)
        return opt

    def train(self, stages=(1, 2), resume: bool = False):
        stage1_in_memory = False
        for stage in stages:
            start, opt_state = 0, None
            if (resume and self.out_dir is not None
                    and self._paths(stage)[0].exists()):
                entries, meta = self.load_stage_checkpoint(stage)
                done = int(meta.get("epochs_completed", 0))
                self.history = list(meta.get("history", []))
                if done >= self.cfg.epochs(stage):
                    stage1_in_memory = stage1_in_memory or stage == 1
                    continue
                start, opt_state = done, entries
            elif stage == 2 and not stage1_in_memory:
                self.load_stage_checkpoint(1)  # fresh stage 2 starts from stage 1
            self.run_stage(stage, start, opt_state)
            stage1_in_memory = stage1_in_memory or stage == 1
        return self
