"""Soft dice loss for training; hard DSC / Jaccard metrics for evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

DICE_EPS = 1e-6


def one_hot(mask: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """N x H x W integer mask -> N x K x H x W indicator array."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got [{mask.min()}, {mask.max()}]")
    return (mask[:, None, :, :] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def soft_dice_loss(probs: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean`` over foreground classes of the soft dice score.

    Per class ``c``: ``(2 * sum(p_c * t_c) + eps) / (sum(p_c) + sum(t_c) + eps)``,
    with sums over batch and pixels. Class 0 is background and excluded.
    """
    n, k, h, w = probs.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    t = one_hot(target, k, probs.dtype)
    axes = (0, 2, 3)
    inter = ops.sum(probs * Tensor(t), axis=axes)
    denom = ops.sum(probs, axis=axes) + Tensor(t.sum(axis=axes))
    dsc = (inter * 2.0 + eps) / (denom + eps)
    fg = np.ones(k, dtype=probs.dtype)
    fg[0] = 0.0
    return 1.0 - ops.sum(dsc * Tensor(fg)) * (1.0 / (k - 1))


def _check_pair(a, b):
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc_from_counts(inter: int, size_a: int, size_b: int) -> float:
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def ji_from_counts(inter: int, size_a: int, size_b: int) -> float:
    union = size_a + size_b - inter
    if union == 0:
        return 1.0
    return inter / union


def hard_dsc(a, b) -> float:
    """Dice similarity of two binary masks; 1.0 when both are empty."""
    a, b = _check_pair(a, b)
    return dsc_from_counts(int(np.count_nonzero(a & b)), int(a.sum()), int(b.sum()))


def jaccard(a, b) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a, b = _check_pair(a, b)
    return ji_from_counts(int(np.count_nonzero(a & b)), int(a.sum()), int(b.sum()))


def binarize(probs) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lower class id."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1)


@dataclass
class MetricsReport:
    num_classes: int
    intersection: np.ndarray
    pred_size: np.ndarray
    true_size: np.ndarray
    n_samples: int
    split: str = "test"
    dsc: Dict[int, float] = field(init=False)
    ji: Dict[int, float] = field(init=False)

    def __post_init__(self):
        self.dsc = {c: dsc_from_counts(int(self.intersection[c]), int(self.pred_size[c]), int(self.true_size[c]))
                    for c in range(self.num_classes)}
        self.ji = {c: ji_from_counts(int(self.intersection[c]), int(self.pred_size[c]), int(self.true_size[c]))
                   for c in range(self.num_classes)}

    @property
    def mean_fg_dsc(self) -> float:
        return float(np.mean([self.dsc[c] for c in range(1, self.num_classes)]))

    @property
    def mean_fg_ji(self) -> float:
        return float(np.mean([self.ji[c] for c in range(1, self.num_classes)]))

    def to_text(self) -> str:
        lines = []
        for c in range(self.num_classes):
            lines.append(f"{self.split}.class{c}.dsc = {self.dsc[c]:.6f}")
            lines.append(f"{self.split}.class{c}.ji = {self.ji[c]:.6f}")
        lines.append(f"{self.split}.mean_foreground.dsc = {self.mean_fg_dsc:.6f}")
        lines.append(f"{self.split}.mean_foreground.ji = {self.mean_fg_ji:.6f}")
        lines.append(f"{self.split}.samples = {self.n_samples}")
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = float(value)
    return out


def count_overlaps(pred: np.ndarray, true: np.ndarray, num_classes: int):
    """Per-class intersection, predicted size and true size, as int64 arrays."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    pred_size = np.bincount(pred.ravel(), minlength=num_classes)[:num_classes].astype(np.int64)
    true_size = np.bincount(true.ravel(), minlength=num_classes)[:num_classes].astype(np.int64)
    hits = true.ravel()[pred.ravel() == true.ravel()]
    inter = np.bincount(hits, minlength=num_classes)[:num_classes].astype(np.int64)
    return inter, pred_size, true_size


def evaluate_predictions(preds: Sequence[np.ndarray], trues: Sequence[np.ndarray], num_classes: int,
                         split: str = "test") -> MetricsReport:
    inter = np.zeros(num_classes, dtype=np.int64)
    ps = np.zeros(num_classes, dtype=np.int64)
    ts = np.zeros(num_classes, dtype=np.int64)
    n = 0
    for p, t in zip(preds, trues):
        i, a, b = count_overlaps(p, t, num_classes)
        inter += i
        ps += a
        ts += b
        n += 1 if np.ndim(t) == 2 else len(t)
    return MetricsReport(num_classes, inter, ps, ts, n, split)


def evaluate_dataset(model, samples: Sequence, batch_size: int = 2, split: str = "test") -> MetricsReport:
    """Eval-mode forward over ``samples`` with counts accumulated over the whole split."""
    if not samples:
        raise ValueError("no samples to evaluate")
    from .data import batch_iter

    preds, trues = [], []
    with no_grad():
        for images, masks in batch_iter(samples, batch_size):
            probs = model.forward(images.astype(next(iter(model.params.values())).dtype), mode="eval")
            preds.append(binarize(probs))
            trues.append(masks)
    return evaluate_predictions(preds, trues, model.config.num_classes, split)
