"""Per-sample statistics that the selection policies rank on."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate

from .model import GradientVector, ToySegModel, backward, embed, forward, loss_ce
from .types import ClassHistogram, EmptyHistogramError, class_histogram, histogram_distribution

MSCN_C = 1.0 / 255.0
SCORE_KINDS = ("loss", "entropy", "tv_image", "tv_label", "naturalness", "classes", "embedding", "gradient")
CSV_COLUMNS = (
    "id",
    "task_id",
    "loss",
    "entropy",
    "tv_image",
    "tv_label",
    "naturalness",
    "distinct_classes",
    "uniformity_distance",
)


def image_entropy(acts) -> float:
    """Mean Shannon entropy (nats) of the per-pixel posterior over all pixels."""
    logp = acts.log_posterior
    p = np.exp(logp)
    terms = np.where(p > 0, -p * np.where(p > 0, logp, 0.0), 0.0)
    return float(terms.sum(axis=1).mean())


def total_variation(grid) -> float:
    """Anisotropic total variation.

    3-D inputs are images: channels are averaged to luminance and absolute
    neighbour differences summed. 2-D inputs are label maps: the number of
    horizontally or vertically adjacent pairs with different class.
    """
    g = np.asarray(grid)
    if g.ndim == 3:
        lum = g.astype(np.float64).mean(axis=0)
        return float(np.abs(np.diff(lum, axis=0)).sum() + np.abs(np.diff(lum, axis=1)).sum())
    if g.ndim == 2:
        return float((g[1:, :] != g[:-1, :]).sum() + (g[:, 1:] != g[:, :-1]).sum())
    raise ValueError(f"expected an image or a label map, got shape {g.shape}")


def gaussian_window(size: int = 7, sigma: float = 7.0 / 6.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def mscn(image) -> np.ndarray:
    """Mean-subtracted contrast-normalised luminance coefficients."""
    lum = np.asarray(image, dtype=np.float64).mean(axis=0)
    w = gaussian_window()
    mu = correlate(lum, w, mode="reflect")
    var = correlate(lum * lum, w, mode="reflect") - mu * mu
    sigma = np.sqrt(np.abs(var))
    return (lum - mu) / (sigma + MSCN_C)


def naturalness_score(image) -> float:
    """|kurtosis - 3| + |skewness| of the MSCN coefficients; 0 for Gaussian statistics."""
    x = mscn(image).ravel()
    x = x - x.mean()
    m2 = float(np.mean(x**2))
    if m2 <= 1e-24:
        return 3.0
    skew = float(np.mean(x**3)) / m2**1.5
    kurt = float(np.mean(x**4)) / m2**2
    return abs(kurt - 3.0) + abs(skew)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 1.0
    if u is v or np.array_equal(u, v):
        return 0.0
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def perceptual_distance(a, b, model: ToySegModel) -> float:
    """Cosine distance between the two samples' embeddings (an LPIPS stand-in)."""
    return cosine_distance(embed(model, a.image), embed(model, b.image))


def uniformity_distance(hist: ClassHistogram, classes=None) -> float:
    """L1 distance between the class distribution and uniform over ``classes``.

    ``classes`` defaults to all classes of the histogram.
    """
    classes = sorted(classes) if classes is not None else list(range(hist.num_classes))
    counts = hist.counts[classes]
    if counts.sum() <= 0:
        raise EmptyHistogramError("histogram has no pixels in the given classes")
    p = histogram_distribution(ClassHistogram(counts, len(classes)))
    return float(np.abs(p - 1.0 / len(classes)).sum())


@dataclass
class SampleScores:
    id: int
    task_id: int
    histogram: ClassHistogram
    distinct_classes: int
    uniformity_distance: Optional[float]
    loss: float = float("nan")
    entropy: float = float("nan")
    tv_image: float = float("nan")
    tv_label: float = float("nan")
    naturalness: float = float("nan")
    embedding: Optional[np.ndarray] = None
    gradient: Optional[GradientVector] = None
    sample: object = field(default=None, repr=False)

    @property
    def eligible(self) -> bool:
        return self.uniformity_distance is not None

    def row(self) -> dict:
        return {
            "id": self.id,
            "task_id": self.task_id,
            "loss": self.loss,
            "entropy": self.entropy,
            "tv_image": self.tv_image,
            "tv_label": self.tv_label,
            "naturalness": self.naturalness,
            "distinct_classes": self.distinct_classes,
            "uniformity_distance": "" if self.uniformity_distance is None else self.uniformity_distance,
        }


def score_sample(model: ToySegModel, sample, required=SCORE_KINDS, classes=None) -> SampleScores:
    required = set(required)
    hist = class_histogram(sample.labels, model.num_classes)
    in_task = sorted(classes) if classes is not None else list(range(model.num_classes))
    try:
        ud = uniformity_distance(hist, in_task)
    except EmptyHistogramError:
        ud = None
    s = SampleScores(
        id=sample.id,
        task_id=sample.task_id,
        histogram=hist,
        distinct_classes=int(np.count_nonzero(hist.counts)),
        uniformity_distance=ud,
        sample=sample,
    )
    if required & {"loss", "entropy", "embedding"}:
        acts = forward(model, np.asarray(sample.image, dtype=model.dtype))
        if "loss" in required:
            s.loss = loss_ce(acts, sample.labels)[0]
        if "entropy" in required:
            s.entropy = image_entropy(acts)
        if "embedding" in required:
            s.embedding = acts.h2.mean(axis=0, dtype=np.float64)
    if "tv_image" in required:
        s.tv_image = total_variation(sample.image)
    if "tv_label" in required:
        s.tv_label = total_variation(sample.labels)
    if "naturalness" in required:
        s.naturalness = naturalness_score(sample.image)
    if "gradient" in required:
        s.gradient = backward(model, np.asarray(sample.image, dtype=model.dtype), sample.labels)
    return s


def score_dataset(model: ToySegModel, samples, required=SCORE_KINDS, classes=None) -> list:
    """One :class:`SampleScores` per sample, ordered by sample id.

    ``classes`` fixes the class set used for uniformity distances (the task's
    labeled classes); by default every class of the model counts.
    Gradients are only computed when ``"gradient"`` is requested.
    """
    return [score_sample(model, s, required, classes) for s in sorted(samples, key=lambda s: s.id)]


def write_scores_csv(scores: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for s in scores:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in s.row().items()})
