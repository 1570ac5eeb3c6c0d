"""Hard segmentation metrics from per-class confusion counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRICS = ("dice", "iou", "accuracy", "precision", "recall")


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class ConfusionAccumulator:
    num_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    tn: np.ndarray = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def update(self, pred: np.ndarray, true: np.ndarray) -> "ConfusionAccumulator":
        pred, true = np.asarray(pred), np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"prediction shape {pred.shape} != truth shape {true.shape}")
        k = self.num_classes
        for arr, what in ((pred, "prediction"), (true, "truth")):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{what} contains labels outside 0..{k - 1}")
        cm = np.bincount(true.reshape(-1).astype(np.int64) * k + pred.reshape(-1), minlength=k * k).reshape(k, k)
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.tn += pred.size - tp - fp - fn
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        return ConfusionAccumulator(
            self.num_classes, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def present(self) -> np.ndarray:
        """Classes that occur in the prediction or the truth."""
        return (self.tp + self.fp + self.fn) > 0

    def per_class(self) -> dict[str, np.ndarray]:
        tp, fp, fn, tn = (a.astype(np.float64) for a in (self.tp, self.fp, self.fn, self.tn))
        res = {
            "dice": _ratio(2 * tp, 2 * tp + fp + fn),
            "iou": _ratio(tp, tp + fp + fn),
            "accuracy": _ratio(tp + tn, tp + fp + fn + tn),
            "precision": _ratio(tp, tp + fp),
            "recall": _ratio(tp, tp + fn),
        }
        absent = ~self.present()
        for v in res.values():
            v[absent] = np.nan
        return res

    def report(self) -> "MetricReport":
        per = self.per_class()
        present = self.present()
        fg = present.copy()
        fg[0] = False
        macro = {m: _nanmean(per[m][present]) for m in METRICS}
        macro_fg = {m: _nanmean(per[m][fg]) for m in METRICS}
        total = self.total
        pixel_acc = float(self.tp.sum() / total) if total else math.nan
        return MetricReport(per, macro, macro_fg, pixel_acc)


def _nanmean(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else math.nan


@dataclass
class MetricReport:
    per_class: dict[str, np.ndarray]
    macro: dict[str, float]
    macro_fg: dict[str, float]
    pixel_accuracy: float

    def __getitem__(self, metric: str) -> float:
        return self.macro[metric]

    def to_text(self, class_names=None) -> str:
        """One ``metric.class = value`` line per entry; absent classes print ``nan``."""
        lines = []
        for m in METRICS:
            for c, v in enumerate(self.per_class[m]):
                label = class_names[c] if class_names else str(c)
                lines.append(f"{m}.{label} = {v:.6f}")
            lines.append(f"{m}.macro = {self.macro[m]:.6f}")
            lines.append(f"{m}.macro_fg = {self.macro_fg[m]:.6f}")
        lines.append(f"pixel_accuracy.all = {self.pixel_accuracy:.6f}")
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            out[key.strip()] = float(val)
    return out


def evaluate(pred_mask, true_mask, num_classes: int | None = None) -> MetricReport:
    pred_mask, true_mask = np.asarray(pred_mask), np.asarray(true_mask)
    if num_classes is None:
        num_classes = int(max(pred_mask.max(initial=0), true_mask.max(initial=0))) + 1
    return ConfusionAccumulator(num_classes).update(pred_mask, true_mask).report()
