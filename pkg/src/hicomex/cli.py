"""Command-line entry point: synth-gen, train, eval, gradcheck.

Thread count is applied to the BLAS environment before numpy loads, so the
heavy imports happen lazily inside the command handlers. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numerical-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    exit_code = 1


def build_parser() -> _Parser:
    parser = _Parser(prog="hicomex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="run config file (INI)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", type=Path, help="override [run] out_dir")
        p.add_argument("--threads", type=int,
                       help="BLAS thread cap (env HICOMEX_THREADS as fallback)")

    gen = sub.add_parser("synth-gen", help="generate the synthetic dataset")
    common(gen)

    train = sub.add_parser("train", help="run the two-stage training")
    common(train)
    train.add_argument("--manifest", type=Path, help="training manifest")
    train.add_argument("--eval-manifest", type=Path,
                       help="held-out manifest for the per-epoch metric")
    train.add_argument("--stage", choices=("1", "2", "both"), default="both")
    train.add_argument("--ablation",
                       choices=("none", "bilstm", "attention", "hopfield", "full"))
    train.add_argument("--resume", action="store_true",
                       help="continue from the last epoch checkpoint")

    ev = sub.add_parser("eval", help="evaluate a checkpoint or run k-fold")
    common(ev)
    ev.add_argument("--checkpoint", type=Path, help="stage-2 checkpoint to load")
    ev.add_argument("--manifest", type=Path, help="evaluation manifest")
    ev.add_argument("--folds", type=int,
                    help="subject-exclusive k-fold with per-fold training")
    ev.add_argument("--ablation",
                    choices=("none", "bilstm", "attention", "hopfield", "full"))

    gc = sub.add_parser("gradcheck", help="finite-difference verification")
    common(gc)
    return parser


def apply_threads(args):
    threads = args.threads
    if threads is None and os.environ.get("HICOMEX_THREADS"):
        try:
            threads = int(os.environ["HICOMEX_THREADS"])
        except ValueError:
            raise UsageError(
                f"HICOMEX_THREADS={os.environ['HICOMEX_THREADS']!r} is not an "
                f"integer") from None
    if threads and threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def load_config(args):
    from .config import RunConfig

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    if args.out is not None:
        cfg.set("run", "out_dir", str(args.out))
    if args.threads is not None:
        cfg.set("run", "threads", str(args.threads))
    if getattr(args, "ablation", None):
        cfg.apply_ablation(args.ablation)
    return cfg


def cmd_synth_gen(args) -> int:
    import numpy as np

    from .data import generate_synthetic, write_synthetic

    cfg = load_config(args)
    spec = cfg.synthetic_spec()
    out_dir = Path(cfg.out_dir)
    print(f"seed={cfg.seed}")
    manifest, samples = generate_synthetic(
        spec, cfg.seed, table=cfg.center_table(), image_format=cfg.image_format)
    path = write_synthetic(manifest, samples, out_dir)
    labels = np.stack([s.au_labels for s in samples])
    print(f"wrote {len(samples)} samples to {out_dir} (manifest: {path})")
    print("label marginals:")
    for au, rate in zip(spec.au_ids, labels.mean(axis=0)):
        print(f"  AU{au}: {rate:.3f}")
    for a, b in spec.exclusions:
        ia, ib = spec.au_ids.index(a), spec.au_ids.index(b)
        both = int(((labels[:, ia] == 1) & (labels[:, ib] == 1)).sum())
        print(f"exclusion violations AU{a}/AU{b}: {both}")
    return 0


def _load_dataset(cfg, manifest_path):
    from .data import load_samples, read_manifest

    if manifest_path is None:
        raise UsageError("--manifest is required (no default dataset path)")
    manifest = read_manifest(manifest_path)
    root = cfg.get("data", "image_root") or Path(manifest_path).parent
    return manifest, load_samples(manifest, root)


def _build_model(cfg, au_ids):
    from .model import AUDetector
    from .rng import SplitRng

    model_cfg = cfg.model_config()
    if tuple(au_ids) != model_cfg.au_ids:
        cfg.set("model", "au_ids", ",".join(str(a) for a in au_ids))
        model_cfg = cfg.model_config()
    model = AUDetector(model_cfg, cfg.center_table())
    model.init_params(SplitRng(cfg.seed, ("init",)))
    return model


def cmd_train(args) -> int:
    from .data import load_samples, read_manifest
    from .train import Trainer

    cfg = load_config(args)
    manifest, samples = _load_dataset(cfg, args.manifest)
    eval_samples = None
    if args.eval_manifest:
        eval_manifest = read_manifest(args.eval_manifest)
        root = cfg.get("data", "image_root") or Path(args.eval_manifest).parent
        eval_samples = load_samples(eval_manifest, root)

    model = _build_model(cfg, manifest.au_ids)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"seed={cfg.seed}")
    print(f"config digest: {cfg.digest()}")

    log_path = out_dir / "train.log"
    log_file = open(log_path, "a", encoding="utf-8")

    def log(line):
        print(line)
        log_file.write(line + "\n")
        log_file.flush()

    trainer = Trainer(model, cfg.train_config(), samples, eval_samples,
                      seed=cfg.seed, out_dir=out_dir,
                      config_digest=cfg.digest(), log_fn=log)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    try:
        trainer.train(stages=stages, resume=args.resume)
    finally:
        log_file.close()
    print(f"checkpoints in {out_dir}")
    return 0


def _print_f1_table(au_ids, per_au, macro, prefix=""):
    header = " ".join(f"AU{a:<4}" for a in au_ids) + " Avg"
    values = " ".join(f"{100 * v:<6.1f}" for v in per_au) + f" {100 * macro:.1f}"
    print(prefix + header)
    print(prefix + values)


def cmd_eval(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import f1_per_au, kfold_subject_exclusive
    from .errors import CheckpointError, DataError
    from .train import Trainer, evaluate, predict_probs

    cfg = load_config(args)
    manifest, samples = _load_dataset(cfg, args.manifest)
    print(f"seed={cfg.seed}")

    if args.folds:
        model_au = cfg.model_config().au_ids
        if tuple(manifest.au_ids) != model_au:
            cfg.set("model", "au_ids", ",".join(str(a) for a in manifest.au_ids))
        pooled_preds, pooled_labels = [], []
        for fold, (train_idx, test_idx) in enumerate(
                kfold_subject_exclusive(samples, k=args.folds, seed=cfg.seed)):
            model = _build_model(cfg, manifest.au_ids)
            trainer = Trainer(model, cfg.train_config(),
                              [samples[i] for i in train_idx],
                              seed=cfg.seed,
                              out_dir=Path(cfg.out_dir) / f"fold{fold}",
                              config_digest=cfg.digest(), log_fn=print)
            trainer.train(stages=(1, 2))
            test = [samples[i] for i in test_idx]
            per_au, macro = evaluate(model, test)
            print(f"fold {fold}:")
            _print_f1_table(manifest.au_ids, per_au, macro, prefix="  ")
            pooled_preds.append(predict_probs(model, test) > 0.5)
            pooled_labels.append(np.stack([s.au_labels for s in test]))
        per_au, macro = f1_per_au(np.concatenate(pooled_preds).astype(int),
                                  np.concatenate(pooled_labels))
        print("pooled:")
        _print_f1_table(manifest.au_ids, per_au, macro, prefix="  ")
        return 0

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --folds for k-fold)")
    digest, entries = load_checkpoint(args.checkpoint)
    if digest != cfg.digest():
        raise CheckpointError(
            f"checkpoint digest {digest[:12]}… does not match config digest "
            f"{cfg.digest()[:12]}…")
    model_cfg = cfg.model_config()
    if tuple(manifest.au_ids) != model_cfg.au_ids:
        raise DataError(
            f"AU list mismatch: checkpoint covers {model_cfg.au_ids}, manifest "
            f"has {tuple(manifest.au_ids)}")
    model = _build_model(cfg, manifest.au_ids)
    model.load_state_dict({k: v for k, v in entries.items()
                           if not k.startswith("momentum/")})
    per_au, macro = evaluate(model, samples)
    _print_f1_table(manifest.au_ids, per_au, macro)
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import assert_all_passed, format_report, run_gradcheck

    cfg = load_config(args)
    print(f"seed={cfg.seed}")
    results, elapsed = run_gradcheck(cfg.seed)
    print(format_report(results, elapsed, cfg.seed))
    assert_all_passed(results)
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        apply_threads(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # package errors carry their exit codes
        exit_code = getattr(exc, "exit_code", None)
        if exit_code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return exit_code


if __name__ == "__main__":
    sys.exit(main())
