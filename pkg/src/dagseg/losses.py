"""Soft Dice, sparse categorical cross-entropy and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dagseg.tensor import Tensor, as_tensor

DICE_EPS = 1e-6


@dataclass
class LossWeights:
    w_dice: float = 0.7
    w_scce: float = 0.3

    def __post_init__(self):
        if self.w_dice < 0 or self.w_scce < 0:
            raise ValueError("loss weights must be non-negative")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)].flat[0]
        raise ValueError(f"label {bad} out of range for {num_classes} classes")
    return np.eye(num_classes)[labels]


def _check(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    return one_hot(labels, logits.shape[-1])


def dice_loss(logits, labels, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_c (2 sum p y + eps) / (sum p + sum y + eps)`` over the whole batch."""
    logits = as_tensor(logits)
    y = _check(logits, labels)
    p = logits.softmax(axis=-1)
    axes = tuple(range(logits.ndim - 1))
    inter = (p * y).sum(axis=axes)
    denom = p.sum(axis=axes) + y.sum(axis=axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - dice.mean()


def scce_loss(logits, labels) -> Tensor:
    """Mean per-pixel negative log-likelihood of the true class."""
    logits = as_tensor(logits)
    y = _check(logits, labels)
    pixels = y.size // y.shape[-1]
    return -(logits.log_softmax(axis=-1) * y).sum() * (1.0 / pixels)


def combined_loss(logits, labels, weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    return dice_loss(logits, labels) * w.w_dice + scce_loss(logits, labels) * w.w_scce
