"""Training loop: AdamW, warmup + cosine schedule, gradient accumulation, metrics."""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import faults
from .core import RngStream, backward, cross_entropy, no_grad
from .data import AugmentPolicy, LabeledImageSet, augment
from .errors import ConfigError, ContractError, DataError
from .model import VisionModel, forward


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> tuple:
    """One AdamW update in place on ``params[name].data``.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` is applied before
    the bias-corrected adaptive step.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ContractError(f"gradient shape {np.shape(g)} does not match parameter {name!r} {params[name].shape}")
    state.t += 1
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_epochs: float
    total_epochs: float
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.total_epochs <= 0 or not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs <= total_epochs and total_epochs > 0")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be non-negative")


def lr_at(epoch: float, schedule: Schedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr``.

    ``min_lr`` is capped at ``base_lr`` so a zero base rate means no update.
    """
    s = schedule
    if not 0.0 <= epoch <= s.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    if s.warmup_epochs > 0 and epoch < s.warmup_epochs:
        return s.base_lr * epoch / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs
    if span == 0:
        return s.base_lr
    floor = min(s.min_lr, s.base_lr)
    progress = (epoch - s.warmup_epochs) / span
    return floor + 0.5 * (s.base_lr - floor) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- accumulation

@dataclass(frozen=True)
class AccumConfig:
    micro_batch: int
    steps: int = 1

    def __post_init__(self):
        if self.micro_batch < 1 or self.steps < 1:
            raise ConfigError("micro_batch and steps must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.steps


@dataclass
class StepResult:
    loss: float  # mean over all samples of the step
    predictions: np.ndarray
    labels: np.ndarray


def accumulate_and_step(model: VisionModel, micro_batches: list, optimizer: OptimizerState, accum: AccumConfig,
                        lr: float | None = None) -> StepResult:
    """Average gradients over ``accum.steps`` equal micro-batches, then take one step.

    Each micro-batch is ``(images, labels)``.  Because every micro-batch loss
    is a mean over ``micro_batch`` samples, averaging the k gradients equals
    the gradient of the mean loss over all ``k * micro_batch`` samples.
    """
    if len(micro_batches) != accum.steps:
        raise ContractError(f"expected {accum.steps} micro-batches, got {len(micro_batches)}")
    params = model.parameters()
    by_id = {id(p): name for name, p in params.items()}
    total = {name: np.zeros_like(p.data) for name, p in params.items()}
    losses, preds, labels = [], [], []
    for images, y in micro_batches:
        if len(y) != accum.micro_batch:
            raise ContractError(f"micro-batch of {len(y)} samples, expected {accum.micro_batch}")
        logits = forward(model, images)
        loss = cross_entropy(logits, y)
        for leaf, g in backward(loss).items():
            name = by_id.get(id(leaf))
            if name is not None:
                total[name] += g
        losses.append(float(loss.data))
        preds.append(logits.data.argmax(axis=1))
        labels.append(np.asarray(y))
    scale = 1.0 if faults.active("accumulation") else 1.0 / accum.steps
    grads = {name: g * scale for name, g in total.items()}
    adamw_step(params, grads, optimizer, lr)
    return StepResult(float(np.mean(losses)), np.concatenate(preds), np.concatenate(labels))


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    epoch_time: float | None = None
    loss: float | None = None

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
        }
        if self.epoch_time is not None:
            out["epoch_time_s"] = self.epoch_time
        if self.loss is not None:
            out["loss"] = self.loss
        return out


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    labels, predictions = np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def metrics_from_confusion(cm) -> MetricsReport:
    """Per-class and macro precision / recall / F1.

    Precision is 0 for a class that is never predicted; classes with no
    ground-truth samples are left out of the macro means.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    actual = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = actual > 0
    total = cm.sum()
    if total == 0:
        raise DataError("cannot compute metrics on an empty evaluation set")
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        confusion=cm,
    )


def evaluate(model: VisionModel, dataset: LabeledImageSet, batch_size: int = 64) -> MetricsReport:
    """Metrics of argmax predictions; independent of dataset order."""
    n_classes = model.config.n_classes
    if len(dataset) == 0:
        raise ConfigError("evaluation set is empty")
    preds, losses = [], []
    with no_grad():
        for s in range(0, len(dataset), batch_size):
            logits = forward(model, dataset.images[s:s + batch_size])
            preds.append(logits.data.argmax(axis=1))
            y = dataset.labels[s:s + batch_size]
            if y.max() >= n_classes:
                raise DataError(f"label {y.max()} out of range for {n_classes} classes")
            losses.append(float(cross_entropy(logits, y).data) * len(y))
    report = metrics_from_confusion(confusion_matrix(dataset.labels, np.concatenate(preds), n_classes))
    report.loss = float(sum(losses) / len(dataset))
    return report


# ---------------------------------------------------------------- epochs

def train_epoch(model: VisionModel, dataset: LabeledImageSet, optimizer: OptimizerState, schedule: Schedule,
                accum: AccumConfig, rng: RngStream, epoch: int = 0,
                policy: AugmentPolicy | None = None) -> MetricsReport:
    """One pass of shuffled effective batches (an incomplete final batch is dropped).

    The learning rate is read from ``schedule`` at the fractional epoch
    reached after each step.  ``epoch_time`` covers shuffling, augmentation,
    forward, backward and the optimizer.
    """
    N, B = len(dataset), accum.effective_batch
    if N == 0:
        raise ConfigError("training set is empty")
    if N < B:
        raise ConfigError(f"training set of {N} samples is smaller than the effective batch {B}")
    start = time.perf_counter()
    erng = rng.child(epoch)
    order = erng.child(0).permutation(N)
    n_steps = N // B
    losses, preds, labels = [], [], []
    for step in range(n_steps):
        idx = order[step * B:(step + 1) * B]
        images = dataset.images[idx]
        if policy is not None:
            images = augment(images, policy, erng.child(1, step))
        y = dataset.labels[idx]
        micro = [(images[j:j + accum.micro_batch], y[j:j + accum.micro_batch])
                 for j in range(0, B, accum.micro_batch)]
        lr = lr_at(min(epoch + (step + 1) / n_steps, schedule.total_epochs), schedule)
        res = accumulate_and_step(model, micro, optimizer, accum, lr)
        losses.append(res.loss)
        preds.append(res.predictions)
        labels.append(res.labels)
    elapsed = time.perf_counter() - start
    report = metrics_from_confusion(
        confusion_matrix(np.concatenate(labels), np.concatenate(preds), model.config.n_classes))
    report.epoch_time = elapsed
    report.loss = float(np.mean(losses))
    return report


@dataclass
class TrainConfig:
    """Everything needed to reproduce a training run; serialised as JSON."""

    preset: str = "cifar10"
    variant: str = "lsh"
    seed: int = 0
    epochs: int = 5
    micro_batch: int = 8
    accum_steps: int = 4
    lr: float = 1e-3
    warmup_epochs: float = 1.0
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    flip_prob: float = 0.5
    crop_padding: int = 4
    data: str = "synthetic"  # "synthetic" or a CIFAR-10 directory
    subset_per_class: int | None = 200
    val_limit: int | None = 1000  # evaluate on the first val_limit validation images
    synthetic_n: int = 256
    synthetic_separation: float = 4.0
    model: dict = field(default_factory=dict)  # keyword overrides for preset_config

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def schedule(self) -> Schedule:
        return Schedule(self.lr, min(self.warmup_epochs, self.epochs), self.epochs, self.min_lr)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, betas=tuple(self.betas), eps=self.eps, weight_decay=self.weight_decay)

    def accum(self) -> AccumConfig:
        return AccumConfig(self.micro_batch, self.accum_steps)

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.flip_prob, self.crop_padding, self.augment)


def fit(model: VisionModel, train_set: LabeledImageSet, cfg: TrainConfig, val_set: LabeledImageSet | None = None,
        metrics_path=None, on_epoch=None) -> list:
    """Train for ``cfg.epochs``; one JSON line per epoch goes to ``metrics_path``."""
    optimizer, schedule, accum, policy = cfg.optimizer(), cfg.schedule(), cfg.accum(), cfg.policy()
    rng = RngStream(cfg.seed).child(7)
    history = []
    fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            report = train_epoch(model, train_set, optimizer, schedule, accum, rng, epoch, policy)
            line = {"epoch": epoch + 1, "lr": lr_at(epoch + 1, schedule), "train_loss": report.loss,
                    "train_accuracy": report.accuracy, "epoch_time_s": report.epoch_time}
            if val_set is not None:
                val = evaluate(model, val_set)
                line.update(val_loss=val.loss, val_accuracy=val.accuracy, val_macro_precision=val.macro_precision,
                            val_macro_recall=val.macro_recall, val_macro_f1=val.macro_f1)
            history.append(line)
            if fh is not None:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
                fh.flush()
            if on_epoch is not None:
                on_epoch(line)
    finally:
        if fh is not None:
            fh.close()
    return history


__all__ = [
    "AccumConfig",
    "MetricsReport",
    "OptimizerState",
    "Schedule",
    "StepResult",
    "TrainConfig",
    "accumulate_and_step",
    "adamw_step",
    "confusion_matrix",
    "evaluate",
    "fit",
    "lr_at",
    "metrics_from_confusion",
    "train_epoch",
]
