"""Two-stage training pipeline and the comparison arms.

Stage one pretrains a baseline; stage two wraps its convs (surgery), freezes
the basis weights and trains the refocusing weights with the rest of the
small parameters. The retrain/finetune arms continue from the same baseline
for paired comparisons. All randomness flows from TrainConfig.seed, and the
data order is shared across arms so runs with the same seed are paired.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .data import AugmentPolicy, Dataset, augment, normalize, subset
from .models import ModelGraph, SurgeryOptions, surgery
from .network import (DECAY_EXEMPT_ROLES, backward, forward, init_params,
                      trainable_entries)
from .ops import softmax_crossentropy
from .tensor import NonFiniteError

CSV_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    base_lr: float = 0.05
    weight_decay: float = 4e-5
    batch_size: int = 128
    epochs: int = 30
    warmup_epochs: int = 2
    schedule: str = "cosine"
    seed: int = 0
    precision: str = "float32"
    data_fraction: float = 1.0

    def __post_init__(self):
        problems = []
        if self.optimizer != "sgd":
            problems.append(f"optimizer must be 'sgd', got {self.optimizer!r}")
        if self.schedule != "cosine":
            problems.append(f"schedule must be 'cosine', got {self.schedule!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            problems.append("epochs and warmup_epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            problems.append("warmup_epochs must be < epochs")
        if not (0.0 < self.data_fraction <= 1.0):
            problems.append(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2 (batchnorm needs it)")
        if self.precision not in ("float32", "float64"):
            problems.append(f"precision must be float32|float64, got {self.precision!r}")
        if self.base_lr <= 0:
            problems.append("base_lr must be positive")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.records:
            lines.append(f"{r.epoch},{r.lr:.8g},{r.train_loss:.8g},{r.train_acc:.8g},"
                         f"{r.val_loss:.8g},{r.val_acc:.8g},{r.seconds:.4f}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path) -> "TrainLog":
        lines = Path(path).read_text().strip().splitlines()
        if lines[0] != ",".join(CSV_COLUMNS):
            raise ValueError(f"unexpected TrainLog header {lines[0]!r}")
        log = TrainLog()
        for line in lines[1:]:
            e, lr, tl, ta, vl, va, sec = line.split(",")
            log.records.append(EpochRecord(int(e), float(lr), float(tl), float(ta),
                                           float(vl), float(va), float(sec)))
        return log


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine down to 0.

    `step` is the global optimizer step; step == warmup end gives exactly
    base_lr, the final step of the schedule gives 0.
    """
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if total <= 0:
        return 0.0
    if step < warm:
        return config.base_lr * step / warm
    t = (step - warm) / max(total - warm, 1)
    t = min(max(t, 0.0), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class SgdMomentum:
    """Heavyweight-ball SGD; decay is added to the gradient (decoupled none).

    Biases and batchnorm affine terms are exempt from weight decay.
    """

    def __init__(self, momentum: float):
        self.momentum = momentum
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, params, grads, lr: float, weight_decay: float) -> None:
        for key, g in grads.items():
            name, role = key
            w = params[name][role]
            if weight_decay and role not in DECAY_EXEMPT_ROLES:
                g = g + weight_decay * w
            v = self.velocity.get(key)
            v = g if v is None else self.momentum * v + g
            self.velocity[key] = v
            w -= lr * v


def evaluate(checkpoint_or_params, graph: ModelGraph, data: Dataset,
             batch_size: int = 250, batch_transform=None) -> tuple[float, float]:
    """Loss and top-1 accuracy over the full split, batchnorm in inference
    mode, inputs normalized by the dataset's attached stats."""
    params = getattr(checkpoint_or_params, "params", checkpoint_or_params)
    n = len(data)
    total_loss, correct = 0.0, 0
    dtype = next(iter(next(iter(params.values())).values())).dtype
    for start in range(0, n, batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        xb = normalize(xb, data.mean, data.std).astype(dtype)
        if batch_transform is not None:
            xb = batch_transform(xb)
        logits, _ = forward(graph, params, xb, training=False, need_caches=False)
        loss, _ = softmax_crossentropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def _run_training(graph: ModelGraph, params, data, config: TrainConfig,
                  constant_lr: Optional[float] = None,
                  augment_policy: Optional[AugmentPolicy] = None,
                  batch_transform=None) -> TrainLog:
    train_ds, val_ds = data
    if config.data_fraction < 1.0:
        train_ds = subset(train_ds, config.data_fraction, config.seed)
    policy = augment_policy if augment_policy is not None else AugmentPolicy()
    n = len(train_ds)
    steps_per_epoch = n // config.batch_size
    if config.epochs > 0 and steps_per_epoch == 0:
        raise ValueError(f"batch size {config.batch_size} larger than dataset ({n})")
    if constant_lr is None:
        lr_fn = lambda step: lr_at(config, step, steps_per_epoch)
    else:
        lr_fn = lambda step: constant_lr
    ss = np.random.SeedSequence([config.seed, 0xDA7A])
    order_rng, aug_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    opt = SgdMomentum(config.momentum)
    mean, std = train_ds.mean, train_ds.std
    dtype = config.dtype
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        loss_sum, correct, seen, last_lr = 0.0, 0, 0, 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            xb = augment(train_ds.images[idx], policy, aug_rng)
            xb = normalize(xb, mean, std).astype(dtype)
            if batch_transform is not None:
                xb = batch_transform(xb)
            yb = train_ds.labels[idx]
            try:
                logits, caches = forward(graph, params, xb, training=True)
                loss, grad_logits = softmax_crossentropy(logits, yb)
            except NonFiniteError as e:
                raise DivergenceError(
                    f"non-finite values at epoch {epoch} step {b} "
                    f"(lr={lr_fn(step):.4g}): {e}") from e
            grads = backward(graph, params, caches, grad_logits)
            last_lr = lr_fn(step)
            opt.step(params, grads, last_lr, config.weight_decay)
            loss_sum += loss * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
            step += 1
        val_loss, val_acc = evaluate(params, graph, val_ds,
                                     batch_transform=batch_transform)
        log.records.append(EpochRecord(
            epoch=epoch, lr=last_lr,
            train_loss=loss_sum / max(seen, 1), train_acc=correct / max(seen, 1),
            val_loss=val_loss, val_acc=val_acc,
            seconds=time.perf_counter() - t0))
    return log


def pretrain(graph: ModelGraph, data, config: TrainConfig,
             augment_policy: Optional[AugmentPolicy] = None,
             batch_transform=None) -> tuple[Checkpoint, TrainLog]:
    """Stage one: train the baseline from scratch."""
    params = init_params(graph, config.seed, dtype=config.dtype)
    log = _run_training(graph, params, data, config,
                        augment_policy=augment_policy, batch_transform=batch_transform)
    ckpt = Checkpoint(model_id=graph.model_id, stage="baseline",
                      precision=config.precision, seed=config.seed, params=params,
                      meta={"train_config": asdict(config)})
    return ckpt, log


def refocus_train(pretrained: Checkpoint, graph: ModelGraph, data,
                  config: TrainConfig, options: SurgeryOptions,
                  augment_policy: Optional[AugmentPolicy] = None,
                  batch_transform=None) -> tuple[Checkpoint, TrainLog]:
    """Stage two: surgery, freeze the basis, train the refocusing weights.

    Postcondition enforced here: every basis tensor in the result is
    bit-identical to the pretrained weight it was built from.
    """
    if pretrained.stage != "baseline":
        raise CheckpointError(f"refocus training needs a baseline checkpoint, "
                              f"got stage {pretrained.stage!r}")
    ref_graph, ref_ckpt = surgery(graph, pretrained, options)
    guard = {d.name: ref_ckpt.params[d.name]["basis"].copy()
             for d in ref_graph.layers if d.kind == "refconv" and not d.basis_trainable}
    log = _run_training(ref_graph, ref_ckpt.params, data, config,
                        augment_policy=augment_policy, batch_transform=batch_transform)
    for name, saved in guard.items():
        if ref_ckpt.params[name]["basis"].tobytes() != saved.tobytes():
            raise RuntimeError(f"frozen basis of {name} changed during training")
    ref_ckpt.meta["train_config"] = asdict(config)
    return ref_ckpt, log


def retrain_arm(pretrained: Checkpoint, graph: ModelGraph, data,
                config: TrainConfig,
                augment_policy: Optional[AugmentPolicy] = None,
                batch_transform=None) -> tuple[Checkpoint, TrainLog]:
    """Continue training the unmodified baseline on the same schedule."""
    if pretrained.stage not in ("baseline", "merged"):
        raise CheckpointError(f"retrain needs a baseline/merged checkpoint, "
                              f"got {pretrained.stage!r}")
    ckpt = pretrained.copy()
    ckpt.stage = "baseline"
    log = _run_training(graph, ckpt.params, data, config,
                        augment_policy=augment_policy, batch_transform=batch_transform)
    ckpt.meta["train_config"] = asdict(config)
    return ckpt, log


def finetune_arm(pretrained: Checkpoint, graph: ModelGraph, data,
                 config: TrainConfig, lr: float = 1e-4,
                 augment_policy: Optional[AugmentPolicy] = None,
                 batch_transform=None) -> tuple[Checkpoint, TrainLog]:
    """Like retrain but at a constant small learning rate, no warmup."""
    if pretrained.stage not in ("baseline", "merged"):
        raise CheckpointError(f"finetune needs a baseline/merged checkpoint, "
                              f"got {pretrained.stage!r}")
    ckpt = pretrained.copy()
    ckpt.stage = "baseline"
    log = _run_training(graph, ckpt.params, data, config, constant_lr=lr,
                        augment_policy=augment_policy, batch_transform=batch_transform)
    ckpt.meta["train_config"] = asdict(config)
    return ckpt, log
