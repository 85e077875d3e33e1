"""Adam, dataset splitting and the dice-loss training loop with early stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from .data import Sample, batch_iter
from .metrics import soft_dice_loss
from .model import Model
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter, in place, from ``.grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name}")
        if p.grad.shape != p.shape:
            raise ValueError(f"gradient shape {p.grad.shape} does not match parameter {name} {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def case_id(source: str) -> str:
    return source.rsplit("_", 1)[0]


def split_dataset(samples: Sequence, ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0,
                  group_by_case: bool = False) -> Tuple[list, list, list]:
    """Seeded shuffle then contiguous train/val/test partition.

    Train and validation sizes are floored; the remainder goes to test. With
    ``group_by_case`` the unit of shuffling is the case id (source stem
    before the last underscore), so slices of one case never straddle splits.
    """
    if not samples:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    if group_by_case:
        groups: Dict[str, list] = {}
        for s in samples:
            groups.setdefault(case_id(s.source), []).append(s)
        keys = sorted(groups)
        units = [groups[keys[i]] for i in rng.permutation(len(keys))]
    else:
        units = [[samples[i]] for i in rng.permutation(len(samples))]
    n = len(units)
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    parts = units[:n_train], units[n_train:n_train + n_val], units[n_train + n_val:]
    return tuple([s for unit in part for s in unit] for part in parts)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    lr: float = 1e-4
    patience: int = 5
    min_delta: float = 1e-4
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    # stop once the epoch's train soft-DSC reaches this value
    target_train_dsc: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    train_dsc: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_dsc: List[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,train_dsc,val_loss,val_dsc"]
        for i in range(self.epochs_run):
            vals = (self.train_loss[i], self.train_dsc[i], self.val_loss[i], self.val_dsc[i])
            rows.append(f"{i + 1}," + ",".join(f"{v:.10f}" for v in vals))
        return "\n".join(rows) + "\n"


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _dtype(model: Model):
    return next(iter(model.params.values())).dtype


def train_step(model: Model, images: np.ndarray, masks: np.ndarray, state: AdamState) -> float:
    model.zero_grad()
    probs = model.forward(Tensor(images.astype(_dtype(model))), mode="train")
    loss = soft_dice_loss(probs, masks)
    value = loss.item()
    if not math.isfinite(value):
        return value
    backward(loss)
    adam_step(model.params, state)
    return value


def validation_loss(model: Model, samples: Sequence[Sample], batch_size: int) -> float:
    """Sample-weighted mean soft dice loss in eval mode."""
    total, count = 0.0, 0
    with no_grad():
        for images, masks in batch_iter(samples, batch_size):
            probs = model.forward(Tensor(images.astype(_dtype(model))), mode="eval")
            total += soft_dice_loss(probs, masks).item() * len(masks)
            count += len(masks)
    return total / count


def train(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig = TrainConfig()) -> Tuple[TrainHistory, bytes]:
    """Train ``model`` in place; returns the history and the best checkpoint's bytes.

    The weights with the lowest validation loss are restored before returning.
    Early stopping fires after ``patience`` consecutive epochs without a
    validation improvement larger than ``min_delta``.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    size = model.config.input_size
    for s in list(train_set) + list(val_set):
        if s.image.shape != (model.config.in_channels, size, size):
            raise ValueError(f"sample {s.source!r} has shape {s.image.shape}, model expects "
                             f"{(model.config.in_channels, size, size)}")

    state = AdamState(lr=cfg.lr)
    hist = TrainHistory()
    best_loss = math.inf
    plateau_ref = math.inf
    best_snap = checkpoint.snapshot(model)
    stale = 0
    hist.stop_reason = "max_epochs"
    for epoch in range(cfg.epochs):
        losses = []
        for b, (images, masks) in enumerate(batch_iter(train_set, cfg.batch_size, _epoch_seed(cfg.seed, epoch))):
            value = train_step(model, images, masks, state)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch + 1}, batch {b + 1}")
            losses.append(value)
        train_loss = float(np.mean(losses))
        val_loss = validation_loss(model, val_set, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch + 1}")
        hist.train_loss.append(train_loss)
        hist.train_dsc.append(1.0 - train_loss)
        hist.val_loss.append(val_loss)
        hist.val_dsc.append(1.0 - val_loss)
        logger.info("epoch %d train_loss=%.6f val_loss=%.6f", epoch + 1, train_loss, val_loss)

        if val_loss < best_loss:
            best_loss = val_loss
            hist.best_epoch = epoch
            best_snap = checkpoint.snapshot(model)
        if val_loss < plateau_ref - cfg.min_delta:
            plateau_ref = val_loss
            stale = 0
        else:
            stale += 1
        if cfg.target_train_dsc is not None and hist.train_dsc[-1] >= cfg.target_train_dsc:
            hist.stop_reason = "target_reached"
            break
        if stale >= cfg.patience:
            hist.stop_reason = "early_stopping"
            break

    checkpoint.restore(model, best_snap)
    return hist, checkpoint.to_bytes(model)
