"""Overlap metrics on binary masks: Dice, mean IoU (fg/bg average), Recall.

All three carry a 1e-6 smoothing term in numerator and denominator so the
empty-vs-empty case scores 1.0 instead of dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMOOTH = 1e-6


def _as_binary(mask) -> np.ndarray:
    data = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("metrics need strictly binary masks")
    return data


def _counts(pred, gt) -> tuple[float, float, float, float]:
    p, g = _as_binary(pred), _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = float((p * g).sum())
    fp = float((p * (1 - g)).sum())
    fn = float(((1 - p) * g).sum())
    tn = float(((1 - p) * (1 - g)).sum())
    return tp, fp, fn, tn


def dice(pred, gt) -> float:
    tp, fp, fn, _ = _counts(pred, gt)
    return (2 * tp + SMOOTH) / (2 * tp + fp + fn + SMOOTH)


def miou(pred, gt) -> float:
    tp, fp, fn, tn = _counts(pred, gt)
    iou_fg = (tp + SMOOTH) / (tp + fp + fn + SMOOTH)
    iou_bg = (tn + SMOOTH) / (tn + fp + fn + SMOOTH)
    return (iou_fg + iou_bg) / 2


def recall(pred, gt) -> float:
    tp, _, fn, _ = _counts(pred, gt)
    return (tp + SMOOTH) / (tp + fn + SMOOTH)


@dataclass
class MetricReport:
    """Per-sample and mean Dice/mIoU/Recall for one evaluated split."""

    sample_ids: list[str] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)
    miou: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)

    def add(self, sample_id: str, pred, gt) -> None:
        self.sample_ids.append(sample_id)
        self.dice.append(dice(pred, gt))
        self.miou.append(miou(pred, gt))
        self.recall.append(recall(pred, gt))

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else 0.0

    @property
    def mean_miou(self) -> float:
        return float(np.mean(self.miou)) if self.miou else 0.0

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recall)) if self.recall else 0.0

    def to_csv(self) -> str:
        """Column order: id,dice,miou,recall; one row per sample, then a mean row."""
        lines = ["id,dice,miou,recall"]
        for sid, d, m, r in zip(self.sample_ids, self.dice, self.miou, self.recall):
            lines.append(f"{sid},{d:.6f},{m:.6f},{r:.6f}")
        lines.append(f"mean,{self.mean_dice:.6f},{self.mean_miou:.6f},{self.mean_recall:.6f}")
        return "\n".join(lines) + "\n"
