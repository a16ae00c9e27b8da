"""Overlap metrics on hard (argmax) masks.

Scores are computed per image from one-vs-rest confusion counts, averaged
over foreground classes, then averaged over images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

METRICS = ("dice", "jaccard", "sensitivity", "accuracy")


@dataclass
class ConfusionCounts:
    tp: np.ndarray  # (C,)
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {true.shape}")
    if pred.size and (max(pred.max(), true.max()) >= num_classes or min(pred.min(), true.min()) < 0):
        raise ContractViolation(f"class id outside [0, {num_classes})")
    joint = np.bincount(
        (true.ravel().astype(np.int64) * num_classes + pred.ravel()), minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)  # rows: truth, cols: prediction
    tp = np.diag(joint).astype(np.int64)
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _absent(c: ConfusionCounts, empty: str) -> tuple[np.ndarray, float]:
    # a class missing from both masks scores 1 ("one") or is skipped as NaN ("skip")
    return (c.tp + c.fp + c.fn) == 0, (1.0 if empty == "one" else np.nan)


def dice_coef(c: ConfusionCounts, empty: str = "one") -> np.ndarray:
    absent, fill = _absent(c, empty)
    den = 2 * c.tp + c.fp + c.fn
    return np.where(absent, fill, 2 * c.tp / np.maximum(den, 1))


def jaccard(c: ConfusionCounts, empty: str = "one") -> np.ndarray:
    absent, fill = _absent(c, empty)
    den = c.tp + c.fp + c.fn
    return np.where(absent, fill, c.tp / np.maximum(den, 1))


def sensitivity(c: ConfusionCounts, empty: str = "one") -> np.ndarray:
    """tp / (tp + fn); a class predicted but absent from the truth scores 0."""
    absent, fill = _absent(c, empty)
    pos = c.tp + c.fn
    return np.where(absent, fill, np.where(pos > 0, c.tp / np.maximum(pos, 1), 0.0))


def accuracy(c: ConfusionCounts) -> np.ndarray:
    total = c.tp + c.fp + c.fn + c.tn
    return (c.tp + c.tn) / total


def macro_average(per_class: np.ndarray, foreground_only: bool = True) -> float:
    """Unweighted mean over classes; class 0 (background) is dropped by default.

    With the ``skip`` empty-class convention absent classes carry NaN and
    are left out of the mean.
    """
    vals = np.asarray(per_class, dtype=np.float64)
    if vals.shape[0] < 2:
        raise ContractViolation("macro_average needs at least two classes")
    if foreground_only:
        vals = vals[1:]
    if np.all(np.isnan(vals)):
        return float("nan")
    return float(np.nanmean(vals))


def image_scores(pred: np.ndarray, true: np.ndarray, num_classes: int, empty: str = "one") -> dict[str, float]:
    c = confusion(pred, true, num_classes)
    per_class = {
        "dice": dice_coef(c, empty),
        "jaccard": jaccard(c, empty),
        "sensitivity": sensitivity(c, empty),
        "accuracy": accuracy(c),
    }
    return {k: macro_average(v) for k, v in per_class.items()}


def evaluate_masks(
    preds: np.ndarray, trues: np.ndarray, num_classes: int, empty: str = "one"
) -> tuple[dict[str, float], np.ndarray]:
    """Mean per-image macro scores plus the per-image dice vector."""
    rows = [image_scores(p, t, num_classes, empty) for p, t in zip(preds, trues)]
    summary = {k: float(np.nanmean([r[k] for r in rows])) for k in METRICS}
    return summary, np.array([r["dice"] for r in rows])
