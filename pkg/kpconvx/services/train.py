"""Optimizer, losses, training loop and voting evaluation."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from kpconvx.errors import ConfigurationError, ContractError, NumericalError
from kpconvx.models.schemas import AugmentationConfig, EvaluationMetrics, OptimizerConfig, SyntheticSpec, TrainConfig
from kpconvx.services.augment import augment, voting_config
from kpconvx.services.metrics import confusion_matrix, metrics_from_confusion
from kpconvx.services.network import Model, architecture_preset
from kpconvx.services.sampling import StackedCloud
from kpconvx.services.synth import SyntheticDataset
from kpconvx.tensorcore import Parameter, Tensor, backward, log_softmax, mul, no_grad, scale, sum_all

logger = logging.getLogger(__name__)


def lr_schedule(epoch: float, cfg: OptimizerConfig) -> float:
    """Exponential decay: ``lr * decay_factor ** (epoch / decay_epochs)``."""
    if epoch < 0:
        raise ContractError(f"Epoch must be non-negative, got {epoch}")
    return cfg.lr * cfg.decay_factor ** (epoch / cfg.decay_epochs)


@dataclass
class AdamWState:
    """First and second moment estimates, keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray | None],
    state: AdamWState,
    cfg: OptimizerConfig,
    lr: float,
) -> None:
    """
    One AdamW update with decoupled weight decay and bias correction.

    Parameters missing from ``grads`` (or mapped to None) are left untouched. A non-finite
    gradient aborts the step before any parameter changes.

    Raises:
        NumericalError: naming the first parameter with a NaN or infinite gradient
    """
    for name in params:
        grad = grads.get(name)
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericalError(f"Non-finite gradient in parameter {name}", name=name)

    state.step += 1
    correction1 = 1 - cfg.beta1**state.step
    correction2 = 1 - cfg.beta2**state.step
    for name, parameter in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(parameter.values))
        v = state.v.setdefault(name, np.zeros_like(parameter.values))
        parameter.values *= 1 - lr * cfg.weight_decay
        m[...] = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v[...] = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
        parameter.values -= lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood against one-hot targets mixed with ``smoothing / n`` uniform mass."""
    if not 0 <= smoothing < 1:
        raise ContractError(f"Label smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows, n = logits.shape
    if labels.size != rows:
        raise ContractError(f"{labels.size} labels for {rows} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= n))
    if bad.size:
        raise ContractError(f"Label {labels[bad[0]]} at index {bad[0]} is outside [0, {n})")
    targets = np.full((rows, n), smoothing / n, dtype=logits.dtype)
    targets[np.arange(rows), labels] += 1 - smoothing
    return scale(sum_all(mul(log_softmax(logits), Tensor(targets, dtype=logits.dtype))), -1.0 / rows)


# Batches


def input_features(task: str, original: np.ndarray, augmented: np.ndarray) -> np.ndarray:
    """Constant one + height for segmentation; one + raw + augmented coordinates for classification."""
    ones = np.ones((augmented.shape[0], 1))
    if task == "segmentation":
        return np.hstack([ones, augmented[:, 2:3]])
    return np.hstack([ones, original, augmented])


def element_labels(cloud: StackedCloud, task: str) -> np.ndarray:
    """Per-point labels for segmentation, the first label of each element for classification."""
    if cloud.labels is None:
        raise ContractError("Cloud has no labels")
    if task == "segmentation":
        return cloud.labels
    return cloud.labels[cloud.offsets]


def prepare_cloud(cloud: StackedCloud, task: str, aug: AugmentationConfig, seed) -> StackedCloud:
    augmented = augment(cloud, aug, seed)
    return augmented.with_features(input_features(task, cloud.points, augmented.points))


def select_batch(sizes: list[int], cfg: TrainConfig, rng: np.random.Generator) -> list[int]:
    """Up to ``batch_clouds`` random clouds, stopping early at the point budget (at least one cloud)."""
    order = rng.permutation(len(sizes))[: cfg.batch_clouds]
    chosen, total = [], 0
    for index in order:
        if chosen and total + sizes[index] > cfg.batch_points:
            break
        chosen.append(int(index))
        total += sizes[index]
    return chosen


def assemble_batch(
    clouds: list[StackedCloud], indices: list[int], task: str, aug: AugmentationConfig, seed: int, epoch: int
) -> StackedCloud:
    """Augment each selected cloud with its own stream keyed by (seed, epoch, index) and stack them."""
    return StackedCloud.concat([prepare_cloud(clouds[i], task, aug, [seed, epoch, i]) for i in indices])


def accumulate_gradients(
    model: Model,
    batches: list[StackedCloud],
    smoothing: float = 0.0,
    rng_for: Callable[[int], np.random.Generator] | None = None,
) -> tuple[float, float]:
    """
    Forward and backward every micro-batch, each loss scaled by ``1 / len(batches)``.

    Returns:
        (mean loss, accuracy over all predictions)
    """
    task = model.cfg.head.task
    losses, correct, total = [], 0, 0
    for i, batch in enumerate(batches):
        labels = element_labels(batch, task)
        logits = model.forward(batch, rng=rng_for(i) if rng_for else None)
        loss = cross_entropy(logits, labels, smoothing)
        if not math.isfinite(loss.item()):
            raise NumericalError(f"Loss became {loss.item()} on micro-batch {i}")
        backward(scale(loss, 1.0 / len(batches)))
        losses.append(loss.item())
        correct += int(np.sum(np.argmax(logits.values, axis=1) == labels))
        total += labels.size
    return float(np.mean(losses)), correct / max(total, 1)


def _droppath_streams(seed: int, epoch: int, step: int) -> Callable[[int], np.random.Generator]:
    return lambda micro: np.random.default_rng([seed, epoch, step, micro, 1])


@dataclass
class TrainResult:
    metrics: pd.DataFrame
    optimizer_state: AdamWState


def train_loop(
    model: Model,
    dataset: SyntheticDataset,
    cfg: TrainConfig,
    seed: int,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """
    Train ``model`` on the training split.

    Each optimizer step accumulates ``cfg.optimizer.accumulation`` micro-batches. Batch
    selection, augmentation and DropPath draw from generators keyed by the seed, the epoch and
    the step, so two runs with the same seed produce identical logs.

    Args:
        model: network to train (put in train mode)
        dataset: synthetic dataset providing the training clouds
        cfg: training configuration
        seed: run seed
        on_step: called with every metrics row, e.g. to append it to a CSV log

    Returns:
        TrainResult with one metrics row per optimizer step
    """
    if dataset.task != model.cfg.head.task:
        raise ConfigurationError(f"Dataset task {dataset.task} does not match the {model.cfg.head.task} head")
    opt = cfg.optimizer
    sizes = [c.num_points for c in dataset.train]
    state = AdamWState()
    rows = []
    model.train()
    for epoch in range(opt.epochs):
        lr = lr_schedule(epoch, opt)
        epoch_losses, epoch_acc = [], []
        for step in range(opt.steps_per_epoch):
            model.zero_grad()
            batches = []
            for micro in range(opt.accumulation):
                indices = select_batch(sizes, cfg, np.random.default_rng([seed, epoch, step, micro]))
                batches.append(assemble_batch(dataset.train, indices, dataset.task, cfg.augmentation, seed, epoch))
            try:
                loss, acc = accumulate_gradients(
                    model,
                    batches,
                    cfg.label_smoothing,
                    rng_for=_droppath_streams(seed, epoch, step),
                )
                params = model.parameters
                adamw_step(params, {name: p.grad for name, p in params.items()}, state, opt, lr)
            except NumericalError as exc:
                raise NumericalError(
                    f"{exc} (seed {seed}, epoch {epoch}, step {step})", name=exc.name, seed=seed
                ) from exc
            row = {"epoch": epoch, "step": state.step, "lr": lr, "loss": loss, "acc": acc}
            rows.append(row)
            epoch_losses.append(loss)
            epoch_acc.append(acc)
            if on_step is not None:
                on_step(row)
        logger.info(
            "epoch %3d  lr %.3e  loss %.4f  acc %.4f",
            epoch,
            lr,
            float(np.mean(epoch_losses)),
            float(np.mean(epoch_acc)),
        )
    metrics = pd.DataFrame(rows, columns=["epoch", "step", "lr", "loss", "acc"])
    return TrainResult(metrics=metrics, optimizer_state=state)


def vote_probabilities(model: Model, cloud: StackedCloud, aug: AugmentationConfig, votes: int) -> np.ndarray:
    """Softmax probabilities averaged over ``votes`` rotations ``2 pi i / votes`` about the rotation axis."""
    if votes < 1:
        raise ContractError(f"votes must be at least 1, got {votes}")
    task = model.cfg.head.task
    total = None
    for i in range(votes):
        view = prepare_cloud(cloud, task, voting_config(aug, 2 * math.pi * i / votes), 0)
        probs = model.predict_proba(view)
        total = probs if total is None else total + probs
    return total / votes


def evaluate_voting(
    model: Model, clouds: list[StackedCloud], votes: int = 1, aug: AugmentationConfig | None = None
) -> EvaluationMetrics:
    """Accuracy, class-mean accuracy and class-mean IoU of vote-averaged predictions."""
    aug = aug or AugmentationConfig()
    model.eval()
    task = model.cfg.head.task
    predictions, labels = [], []
    with no_grad():
        for cloud in clouds:
            probs = vote_probabilities(model, cloud, aug, votes)
            predictions.append(np.argmax(probs, axis=1))
            labels.append(element_labels(cloud, task))
    cm = confusion_matrix(np.concatenate(predictions), np.concatenate(labels), model.cfg.head.num_classes)
    return metrics_from_confusion(cm)


# Presets


TRAIN_PRESETS = ("tiny-seg", "tiny-cls", "kpconvx-l", "kpconvx-s", "kpconvd-l", "kpconvd-s")


def train_preset(name: str) -> TrainConfig:
    """Training configuration around an architecture preset; the tiny ones train at desk scale."""
    arch = architecture_preset(name)
    task = arch.head.task
    synthetic = SyntheticSpec(task=task, num_classes=min(arch.head.num_classes, 4 if task == "segmentation" else 6))
    # the synthetic inputs carry 2 (segmentation) or 7 (classification) feature channels
    arch = arch.model_copy(
        update={
            "in_channels": 2 if task == "segmentation" else 7,
            "head": arch.head.model_copy(update={"num_classes": synthetic.num_classes}),
        }
    )
    if task == "classification":
        return TrainConfig(
            arch=arch,
            synthetic=synthetic,
            augmentation=AugmentationConfig(unit_sphere=True),
            label_smoothing=0.2,
        )
    return TrainConfig(arch=arch, synthetic=synthetic)
