"""Shared domain types, seeded randomness and label-map utilities."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

IGNORE = 255

CLASS_INCREMENTAL = "class_incremental"
DOMAIN_INCREMENTAL = "domain_incremental"
SCENARIOS = (CLASS_INCREMENTAL, DOMAIN_INCREMENTAL)


class ReplaySegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidLabelError(ReplaySegError, ValueError):
    pass


class EmptyHistogramError(ReplaySegError, ValueError):
    pass


class ShapeError(ReplaySegError, ValueError):
    pass


class ConfigError(ReplaySegError, ValueError):
    pass


class TrainingDivergedError(ReplaySegError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def check_image(image, channels: int | None = None) -> np.ndarray:
    """Validate a channel-major image array with values in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be (channels, height, width), got shape {image.shape}")
    if channels is not None and image.shape[0] != channels:
        raise ShapeError(f"expected {channels} channels, got {image.shape[0]}")
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float32)
    if not np.all(np.isfinite(image)) or image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return image


def check_labels(labels, num_classes: int | None = None, shape: tuple | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
    if shape is not None and labels.shape != tuple(shape):
        raise ShapeError(f"label map shape {labels.shape} does not match {tuple(shape)}")
    if labels.dtype != np.uint8:
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise InvalidLabelError("label values must fit in one byte")
        labels = labels.astype(np.uint8)
    if num_classes is not None:
        bad = (labels != IGNORE) & (labels >= num_classes)
        if bad.any():
            value = int(labels[bad][0])
            raise InvalidLabelError(f"label value {value} >= num_classes={num_classes}")
    return labels


@dataclass(frozen=True, eq=False)
class Sample:
    """One training or validation image with its label map.

    ``labels`` carries the task-visible labels (classes outside the task's
    labeled set are IGNORE); ``true_labels`` keeps the generator ground truth
    when it is known.
    """

    id: int
    image: np.ndarray
    labels: np.ndarray
    task_id: int
    true_labels: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ClassHistogram:
    counts: np.ndarray
    num_classes: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_histogram(labels, num_classes: int) -> ClassHistogram:
    """Per-class pixel counts of a label map; IGNORE pixels are excluded."""
    labels = check_labels(labels, num_classes)
    flat = labels.ravel()
    counts = np.bincount(flat[flat != IGNORE], minlength=num_classes).astype(np.int64)
    return ClassHistogram(counts=counts, num_classes=num_classes)


def histogram_distribution(hist: ClassHistogram) -> np.ndarray:
    total = hist.counts.sum()
    if total <= 0:
        raise EmptyHistogramError("histogram has no labeled pixels")
    return hist.counts / float(total)


@dataclass
class TaskDef:
    task_id: int
    train_samples: list
    val_samples: list
    labeled_classes: frozenset
    scenario: str
    exclusive_classes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        self.labeled_classes = frozenset(int(c) for c in self.labeled_classes)
        self.exclusive_classes = frozenset(int(c) for c in self.exclusive_classes)


def check_task_sequence(tasks: list) -> None:
    """Raise ConfigError if the labeled class sets violate the scenario rules."""
    if not tasks:
        raise ConfigError("scenario has no tasks")
    kinds = {t.scenario for t in tasks}
    if len(kinds) != 1:
        raise ConfigError("tasks mix scenario kinds")
    if tasks[0].scenario == CLASS_INCREMENTAL:
        seen: set = set()
        for t in tasks:
            if seen & t.labeled_classes:
                raise ConfigError(f"task {t.task_id} relabels classes {sorted(seen & t.labeled_classes)}")
            seen |= t.labeled_classes
    else:
        first = tasks[0].labeled_classes
        if any(t.labeled_classes != first for t in tasks):
            raise ConfigError("domain-incremental tasks must share the same class set")


class Rng:
    """Seeded generator with independent named substreams.

    ``Rng(7).stream("data", 3)`` always yields the same PCG64 sequence, and
    differs from any other name/key combination.
    """

    def __init__(self, seed: int, *key: int):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self.key))
        )

    def stream(self, name: str, *key: int) -> "Rng":
        return Rng(self.seed, *self.key, zlib.crc32(name.encode("utf-8")), *key)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"
