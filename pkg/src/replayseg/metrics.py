"""Confusion matrices, subset mIoU, task-recency bias and linear CKA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ToySegModel, forward
from .types import IGNORE, ReplaySegError, Rng, ShapeError

LAYERS = ("input", "h1", "h2", "logits")


def confusion(preds, labels, num_classes: int) -> np.ndarray:
    """C x C counts, rows = ground truth, columns = prediction; IGNORE skipped."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f"prediction shape {preds.shape} != label shape {labels.shape}")
    keep = labels.ravel() != IGNORE
    t = labels.ravel()[keep].astype(np.int64)
    p = preds.ravel()[keep].astype(np.int64)
    return np.bincount(t * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass(frozen=True)
class MIoU:
    value: float | None
    per_class: dict
    excluded: int

    @property
    def defined(self) -> bool:
        return self.value is not None


def class_iou(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)


def miou(cm: np.ndarray, class_subset) -> MIoU:
    """Mean IoU over ``class_subset``; classes with an empty union are left out.

    ``value`` is None when every class in the subset has an empty union.
    """
    subset = sorted(int(c) for c in class_subset)
    if not subset:
        raise ValueError("class subset must be non-empty")
    iou = class_iou(cm)
    per_class = {c: (None if np.isnan(iou[c]) else float(iou[c])) for c in subset}
    vals = [v for v in per_class.values() if v is not None]
    return MIoU(float(np.mean(vals)) if vals else None, per_class, len(subset) - len(vals))


def recency_bias(cm: np.ndarray, old_classes, newest_classes) -> float | None:
    """Fraction of old-class ground-truth pixels predicted as a newest-task class."""
    old = sorted(int(c) for c in old_classes)
    new = sorted(int(c) for c in newest_classes)
    if set(old) & set(new):
        raise ValueError("old and newest class sets must be disjoint")
    cm = np.asarray(cm)
    total = cm[old].sum()
    if total == 0:
        return None
    return float(cm[np.ix_(old, new)].sum() / total)


def linear_cka(X, Y) -> float:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    num = np.linalg.norm(Y.T @ X) ** 2
    den = np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)
    if den == 0:
        return 0.0
    return float(num / den)


def probe_pixels(probe: list, n_pixels: int, rng: Rng) -> tuple:
    """Stack probe images and pick ``n_pixels`` pixel rows (all when fewer exist)."""
    images = np.stack([np.asarray(s.image) for s in probe])
    total = images.shape[0] * images.shape[2] * images.shape[3]
    if n_pixels >= total:
        rows = np.arange(total)
    else:
        rows = np.sort(rng.choice(total, size=n_pixels, replace=False))
    return images, rows


def cka_drift(before: ToySegModel, after: ToySegModel, probe: list, rng: Rng, n_pixels: int = 2000, layers=LAYERS) -> dict:
    """Layer-wise linear CKA between two model snapshots on the same probe pixels."""
    if not before.same_architecture(after):
        raise ReplaySegError("models differ in architecture")
    images, rows = probe_pixels(probe, n_pixels, rng)
    a = forward(before, images.astype(before.dtype))
    b = forward(after, images.astype(after.dtype))
    out = {}
    for name in layers:
        xa, xb = a.layer(name)[rows], b.layer(name)[rows]
        if name == "logits":
            # inactive head columns carry no signal
            cols = before.active & after.active
            xa, xb = xa[:, cols], xb[:, cols]
        out[name] = linear_cka(xa, xb)
    return out
