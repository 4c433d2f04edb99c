import argparse
import json
import logging
from pathlib import Path

import pandas as pd

from kpconvx.errors import ConfigurationError
from kpconvx.models.schemas import ArchitectureConfig, TrainConfig
from kpconvx.services.network import ARCHITECTURE_PRESETS, Model, architecture_preset, expected_parameter_counts
from kpconvx.services.synth import synth_generate
from kpconvx.services.train import TRAIN_PRESETS, evaluate_voting, train_loop, train_preset
from kpconvx.storage.checkpoint import load_checkpoint, save_checkpoint
from kpconvx.storage.csvlog import MetricsLog, write_table

logger = logging.getLogger(__name__)


def register(subparsers, common: argparse.ArgumentParser) -> None:
    """Add the ``train``, ``eval`` and ``params`` commands."""
    train = subparsers.add_parser("train", parents=[common], help="Train on a synthetic dataset")
    _add_train_options(train)
    train.add_argument("--out", default="runs/train", help="Directory for metrics.csv and model.kpxc")
    train.set_defaults(handler=run_training)

    evaluate = subparsers.add_parser("eval", parents=[common], help="Voting evaluation of a checkpoint")
    _add_train_options(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--votes", type=int, default=None)
    evaluate.add_argument("--out", default=None, help="Optional CSV with the per-class IoU")
    evaluate.set_defaults(handler=run_evaluation)

    params = subparsers.add_parser("params", parents=[common], help="Per-module parameter counts of an architecture")
    params.add_argument("--arch", choices=ARCHITECTURE_PRESETS, default="kpconvx-l")
    params.add_argument("--config", default=None, help="Architecture config JSON (overrides --arch)")
    params.add_argument("--classes", type=int, default=None)
    params.add_argument("--groups", type=int, default=None)
    params.add_argument("--out", default=None, help="Optional CSV of the audit")
    params.set_defaults(handler=parameter_audit)


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=TRAIN_PRESETS, default="tiny-seg")
    parser.add_argument("--config", default=None, help="Training config JSON (overrides --preset)")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None, help="Optimizer steps per epoch")
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--train-clouds", type=int, default=None)
    parser.add_argument("--val-clouds", type=int, default=None)
    parser.add_argument("--points", type=int, default=None, help="Points per synthetic cloud")


def _update(model, **values):
    """Copy a pydantic model with the given fields, skipping the ones left unset."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return model
    return model.model_validate({**model.model_dump(), **values})


def load_train_config(args: argparse.Namespace) -> TrainConfig:
    """
    Preset or config file first, then explicit flags on top.

    ``--seed``, when given, drives the synthetic data, the weight initialization and the kernel
    optimization. Without it the seeds of the preset or config file stay in place.
    """
    if args.config:
        cfg = TrainConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = train_preset(args.preset)
    optimizer = _update(cfg.optimizer, epochs=args.epochs, steps_per_epoch=args.steps, lr=args.lr)
    synthetic = _update(
        cfg.synthetic,
        train_clouds=args.train_clouds,
        val_clouds=args.val_clouds,
        points_per_cloud=args.points,
        seed=args.seed,
    )
    arch = _update(cfg.arch, init_seed=args.seed, kernel_seed=args.seed)
    return cfg.model_copy(update={"optimizer": optimizer, "synthetic": synthetic, "arch": arch})


def run_training(args: argparse.Namespace) -> int:
    """
    Train, write ``metrics.csv`` and ``model.kpxc`` under ``--out`` and print validation metrics.

    Returns:
        Exit status
    """
    cfg = load_train_config(args)
    out = Path(args.out)
    dataset = synth_generate(cfg.synthetic)
    model = Model(cfg.arch)
    log = MetricsLog(out / "metrics.csv")
    logger.info("Training %s (%d parameters) for %d epochs", cfg.arch.name, model.num_parameters, cfg.optimizer.epochs)
    train_loop(model, dataset, cfg, seed=cfg.synthetic.seed, on_step=log.append)
    save_checkpoint(model, out / "model.kpxc")
    metrics = evaluate_voting(model, dataset.val, votes=cfg.votes, aug=cfg.augmentation)
    print(json.dumps({"checkpoint": str(out / "model.kpxc"), **metrics.model_dump()}, indent=2))
    return 0


def run_evaluation(args: argparse.Namespace) -> int:
    """Regenerate the validation split and run voting evaluation of ``--checkpoint``."""
    cfg = load_train_config(args)
    model = load_checkpoint(args.checkpoint)
    if model.cfg.head.task != cfg.synthetic.task or model.cfg.head.num_classes != cfg.synthetic.num_classes:
        raise ConfigurationError(
            f"Checkpoint head ({model.cfg.head.task}, {model.cfg.head.num_classes} classes) does not match the "
            f"{cfg.synthetic.task} dataset with {cfg.synthetic.num_classes} classes"
        )
    dataset = synth_generate(cfg.synthetic)
    votes = args.votes or cfg.votes
    metrics = evaluate_voting(model, dataset.val, votes=votes, aug=cfg.augmentation)
    if args.out:
        names = dataset.class_names
        write_table(pd.DataFrame({"class": list(names), "iou": metrics.per_class_iou}), args.out)
    print(json.dumps({"votes": votes, **metrics.model_dump()}, indent=2))
    return 0


def parameter_audit(args: argparse.Namespace) -> int:
    """Print the per-module parameter breakdown and the closed-form total."""
    if args.config:
        cfg = ArchitectureConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8"))
        cfg = _update(cfg, groups=args.groups)
        if args.classes is not None:
            cfg = cfg.model_copy(update={"head": cfg.head.model_copy(update={"num_classes": args.classes})})
    else:
        overrides = {"groups": args.groups} if args.groups is not None else {}
        cfg = architecture_preset(args.arch, num_classes=args.classes, **overrides)
    model = Model(cfg)
    audit = pd.DataFrame([row.model_dump() for row in model.parameter_audit()])
    if args.out:
        write_table(audit, args.out)
    by_kind = audit.groupby("kind", sort=False)["count"].sum()
    expected = expected_parameter_counts(cfg)
    print(audit.to_string(index=False))
    print()
    print(by_kind.to_string())
    total = int(audit["count"].sum())
    print(f"\ntotal {total} ({total / 1e6:.3f} M), closed form {sum(expected.values())}")
    return 0
