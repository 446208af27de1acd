"""Per-pixel MLP segmenter over zero-padded patches, with exact gradients.

Every pixel is classified from its ``k x k`` neighbourhood (all channels,
zero padded at the border) by ``features -> h1 -> h2 -> logits``, with ReLU
after the two hidden layers. The output head always has ``num_classes``
columns; columns of classes not yet introduced are inactive: they are
excluded from the softmax, carry zero weights and receive zero gradient.
Activating a class therefore matches appending a zero-initialised column.

Parameters are flattened in the order ``W1, b1, W2, b2, W3, b3`` (row-major)
wherever a single vector is needed (gradients, checkpoints).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .types import IGNORE, ConfigError, Rng, ShapeError, TrainingDivergedError, check_image

PROB_EPS = 1e-12
LOG_EPS = float(np.log(PROB_EPS))
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class ToySegModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    patch_size: int = 5
    channels: int = 3
    active: np.ndarray = None

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(self.W3.shape[1], dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)
        if self.W1.shape[0] != self.channels * self.patch_size**2:
            raise ShapeError("W1 rows must equal channels * patch_size**2")
        if self.W2.shape[0] != self.W1.shape[1] or self.W3.shape[0] != self.W2.shape[1]:
            raise ShapeError("layer widths are inconsistent")

    @property
    def num_classes(self) -> int:
        return self.W3.shape[1]

    @property
    def widths(self) -> tuple:
        return (self.W1.shape[0], self.W1.shape[1], self.W2.shape[1], self.W3.shape[1])

    @property
    def dtype(self):
        return self.W1.dtype

    @property
    def active_classes(self) -> frozenset:
        return frozenset(int(c) for c in np.flatnonzero(self.active))

    def params(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    def set_params(self, arrays) -> None:
        for name, a in zip(PARAM_NAMES, arrays):
            setattr(self, name, a)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat(self, vector) -> "ToySegModel":
        out = self.copy()
        out.set_params(unflatten(vector, self.params()))
        return out

    def copy(self) -> "ToySegModel":
        return ToySegModel(
            *[p.copy() for p in self.params()],
            patch_size=self.patch_size,
            channels=self.channels,
            active=self.active.copy(),
        )

    def activate(self, classes) -> None:
        """Switch on output columns for ``classes``; new columns start at zero."""
        for c in classes:
            c = int(c)
            if not self.active[c]:
                self.W3[:, c] = 0
                self.b3[c] = 0
                self.active[c] = True

    def same_architecture(self, other: "ToySegModel") -> bool:
        return self.widths == other.widths and self.patch_size == other.patch_size


def unflatten(vector, like) -> list:
    expected = sum(p.size for p in like)
    if len(vector) != expected:
        raise ShapeError(f"vector of length {len(vector)} does not match {expected} parameters")
    out, start = [], 0
    for p in like:
        out.append(np.asarray(vector[start : start + p.size], dtype=p.dtype).reshape(p.shape))
        start += p.size
    return out


def init_model(
    num_classes: int,
    rng: Rng,
    patch_size: int = 5,
    hidden=(64, 32),
    channels: int = 3,
    active_classes=None,
    dtype=np.float32,
    scale: float = 1.0,
) -> ToySegModel:
    """He-initialised hidden layers; output columns of active classes ~ N(0, 1/fan_in)."""
    d_in = channels * patch_size**2
    h1, h2 = hidden
    W1 = rng.normal(0.0, scale * np.sqrt(2.0 / d_in), size=(d_in, h1))
    W2 = rng.normal(0.0, scale * np.sqrt(2.0 / h1), size=(h1, h2))
    W3 = rng.normal(0.0, scale * np.sqrt(1.0 / h2), size=(h2, num_classes))
    active = np.zeros(num_classes, dtype=bool)
    active[sorted(active_classes) if active_classes is not None else slice(None)] = True
    W3[:, ~active] = 0.0
    return ToySegModel(
        W1.astype(dtype),
        np.zeros(h1, dtype=dtype),
        W2.astype(dtype),
        np.zeros(h2, dtype=dtype),
        W3.astype(dtype),
        np.zeros(num_classes, dtype=dtype),
        patch_size=patch_size,
        channels=channels,
        active=active,
    )


def zero_model(num_classes: int, patch_size: int = 5, hidden=(64, 32), channels: int = 3, dtype=np.float64):
    d_in = channels * patch_size**2
    h1, h2 = hidden
    return ToySegModel(
        np.zeros((d_in, h1), dtype),
        np.zeros(h1, dtype),
        np.zeros((h1, h2), dtype),
        np.zeros(h2, dtype),
        np.zeros((h2, num_classes), dtype),
        np.zeros(num_classes, dtype),
        patch_size=patch_size,
        channels=channels,
    )


# forward ----------------------------------------------------------------------


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*k*k) zero-padded neighbourhoods, pixel rows in raster order."""
    b, c, h, w = images.shape
    r = patch_size // 2
    padded = np.pad(images, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(padded, (patch_size, patch_size), axis=(2, 3))  # B,C,H,W,k,k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * patch_size**2)


@dataclass
class Activations:
    features: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    logits: np.ndarray
    log_posterior: np.ndarray
    active: np.ndarray
    shape: tuple = ()

    @property
    def posterior(self) -> np.ndarray:
        p = np.exp(self.log_posterior)
        p[:, ~self.active] = 0.0
        return p

    @property
    def num_pixels(self) -> int:
        return self.features.shape[0]

    def layer(self, name: str) -> np.ndarray:
        return {"input": self.features, "h1": self.h1, "h2": self.h2, "logits": self.logits}[name]


def _log_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    zz = np.where(mask, z, -np.inf)
    m = zz.max(axis=1, keepdims=True)
    s = np.log(np.exp(zz - m).sum(axis=1, keepdims=True))
    out = zz - m - s
    out[:, ~mask] = -np.inf
    return out


def forward_rows(model: ToySegModel, features: np.ndarray, shape: tuple = ()) -> Activations:
    h1 = np.maximum(features @ model.W1 + model.b1, 0)
    h2 = np.maximum(h1 @ model.W2 + model.b2, 0)
    logits = h2 @ model.W3 + model.b3
    return Activations(features, h1, h2, logits, _log_softmax(logits, model.active), model.active.copy(), shape)


def _as_batch(images, channels: int) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got shape {arr.shape}")
    if arr.shape[1] != channels:
        raise ShapeError(f"model expects {channels} channels, image has {arr.shape[1]}")
    return arr


def forward(model: ToySegModel, image) -> Activations:
    """Activations for one (C, H, W) image or a (B, C, H, W) batch."""
    batch = _as_batch(image, model.channels).astype(model.dtype, copy=False)
    feats = extract_patches(batch, model.patch_size)
    return forward_rows(model, feats, shape=batch.shape[:1] + batch.shape[2:])


def predict_labels(model: ToySegModel, image) -> np.ndarray:
    acts = forward(model, image)
    pred = np.argmax(np.where(acts.active, acts.logits, -np.inf), axis=1).astype(np.uint8)
    b, h, w = acts.shape
    return pred.reshape(b, h, w) if np.asarray(image).ndim == 4 else pred.reshape(h, w)


def embed(model: ToySegModel, image) -> np.ndarray:
    """Spatial mean of the second hidden layer."""
    acts = forward(model, check_image(image, model.channels))
    return acts.h2.mean(axis=0, dtype=np.float64)


# losses -----------------------------------------------------------------------


def _clamped(logp: np.ndarray) -> np.ndarray:
    return np.maximum(logp, LOG_EPS)


def loss_ce(acts: Activations, labels) -> tuple:
    """Mean cross-entropy over labeled pixels.

    Returns ``(loss, loss_map, n_labeled)``; ``loss_map`` is zero at IGNORE
    pixels and the loss is 0 when nothing is labeled.
    """
    y = np.asarray(labels).reshape(-1)
    if y.size != acts.num_pixels:
        raise ShapeError("labels do not match activations")
    lab = y != IGNORE
    per_pixel = np.zeros(y.size, dtype=np.float64)
    if lab.any():
        idx = np.flatnonzero(lab)
        per_pixel[idx] = -_clamped(acts.log_posterior[idx, y[idx]])
    n = int(lab.sum())
    loss = float(per_pixel.sum() / n) if n else 0.0
    shape = acts.shape[-2:] if len(acts.shape) == 3 and acts.shape[0] == 1 else (y.size,)
    return loss, per_pixel.reshape(shape), n


def _old_log_posterior(logits: np.ndarray, old_mask: np.ndarray) -> np.ndarray:
    return _log_softmax(logits, old_mask)


def _distill_targets(teacher: Activations, old_mask: np.ndarray) -> np.ndarray:
    # teacher posterior renormalised over the old classes
    return np.exp(_log_softmax(teacher.logits, old_mask & teacher.active))


def loss_cil_parts(student: Activations, teacher: Optional[Activations], labels, old_classes, weight: float = 1.0):
    """Return ``(total, labeled_term, distill_term, n_labeled, n_ignored)``."""
    ce, _, n_lab = loss_ce(student, labels)
    y = np.asarray(labels).reshape(-1)
    old = sorted(old_classes or ())
    if not old:
        return ce, ce, 0.0, n_lab, 0
    if teacher is None:
        raise ConfigError("distillation needs a teacher when old classes exist")
    ign = np.flatnonzero(y == IGNORE)
    if ign.size == 0:
        return ce, ce, 0.0, n_lab, 0
    old_mask = np.zeros(student.logits.shape[1], dtype=bool)
    old_mask[old] = True
    q = _distill_targets(teacher, old_mask)[ign][:, old]
    logp = _old_log_posterior(student.logits[ign], old_mask)[:, old]
    distill = float(-(q * _clamped(logp)).sum() / ign.size)
    return ce + weight * distill, ce, distill, n_lab, int(ign.size)


def loss_cil(student: Activations, teacher: Optional[Activations], labels, old_classes, weight: float = 1.0) -> float:
    """Cross-entropy on labeled pixels plus ``weight`` times distillation on IGNORE pixels.

    The distillation term is the cross-entropy between the teacher posterior
    and the student posterior, both restricted and renormalised to the old
    classes, averaged over IGNORE pixels.
    """
    return loss_cil_parts(student, teacher, labels, old_classes, weight)[0]


def _logit_grad(
    acts: Activations,
    labels: np.ndarray,
    teacher: Optional[Activations] = None,
    old_classes=None,
    weight: float = 1.0,
) -> tuple:
    """Loss value and dLoss/dlogits, honouring the log clamp exactly."""
    y = np.asarray(labels).reshape(-1)
    n = y.size
    grad = np.zeros_like(acts.logits)
    lab = np.flatnonzero(y != IGNORE)
    loss = 0.0
    if lab.size:
        logp_y = acts.log_posterior[lab, y[lab]]
        live = (logp_y > LOG_EPS).astype(acts.logits.dtype)
        p = np.exp(acts.log_posterior[lab])
        p[:, ~acts.active] = 0.0
        g = p * live[:, None]
        g[np.arange(lab.size), y[lab]] -= live
        grad[lab] = g / lab.size
        loss += float(-_clamped(logp_y).sum() / lab.size)
    old = sorted(old_classes or ())
    if old:
        if teacher is None:
            raise ConfigError("distillation needs a teacher when old classes exist")
        ign = np.flatnonzero(y == IGNORE)
        if ign.size:
            old_mask = np.zeros(acts.logits.shape[1], dtype=bool)
            old_mask[old] = True
            q = _distill_targets(teacher, old_mask)[ign]
            logp = _old_log_posterior(acts.logits[ign], old_mask)
            logp_old = np.where(old_mask, logp, 0.0)
            w = np.where(old_mask & (logp > LOG_EPS), q, 0.0)
            p_old = np.where(old_mask, np.exp(logp), 0.0)
            g = p_old * w.sum(axis=1, keepdims=True) - w
            grad[ign] += weight * g / ign.size
            loss += weight * float(-(np.where(old_mask, q, 0.0) * np.maximum(logp_old, LOG_EPS)).sum() / ign.size)
    if grad.shape[0] != n:
        raise ShapeError("labels do not match activations")
    return loss, grad


def _backprop(model: ToySegModel, acts: Activations, dz: np.ndarray) -> list:
    dW3 = acts.h2.T @ dz
    db3 = dz.sum(axis=0)
    dh2 = (dz @ model.W3.T) * (acts.h2 > 0)
    dW2 = acts.h1.T @ dh2
    db2 = dh2.sum(axis=0)
    dh1 = (dh2 @ model.W2.T) * (acts.h1 > 0)
    dW1 = acts.features.T @ dh1
    db1 = dh1.sum(axis=0)
    return [dW1, db1, dW2, db2, dW3, db3]


@dataclass(frozen=True)
class GradientVector:
    data: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "norm", float(np.linalg.norm(self.data.astype(np.float64))))

    def __len__(self):
        return self.data.size

    def cosine(self, other: "GradientVector") -> float:
        if self.norm == 0.0 or other.norm == 0.0:
            return 0.0
        return float(np.dot(self.data.astype(np.float64), other.data.astype(np.float64)) / (self.norm * other.norm))


def loss_and_grads(model, images, labels, teacher: Optional[ToySegModel] = None, old_classes=None, weight=1.0):
    """Loss and per-parameter gradients for a batch (mean over pixels of the batch)."""
    acts = forward(model, images)
    t_acts = forward(teacher, images) if (teacher is not None and old_classes) else None
    loss, dz = _logit_grad(acts, labels, t_acts, old_classes, weight)
    return loss, _backprop(model, acts, dz)


def backward(model, image, labels, loss_kind: str = "ce", teacher=None, old_classes=None, weight: float = 1.0):
    """Exact gradient of ``ce`` or ``cil`` loss w.r.t. all parameters, flattened."""
    if loss_kind == "ce":
        _, grads = loss_and_grads(model, image, labels)
    elif loss_kind == "cil":
        _, grads = loss_and_grads(model, image, labels, teacher, old_classes, weight)
    else:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    return GradientVector(np.concatenate([g.ravel() for g in grads]))


# optimisation -----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int
    base_lr: float
    power: float
    total_steps: int

    @classmethod
    def for_model(cls, model: ToySegModel, base_lr=4e-4, power=0.9, total_steps=1):
        return cls(
            m=[np.zeros_like(p) for p in model.params()],
            v=[np.zeros_like(p) for p in model.params()],
            step=0,
            base_lr=base_lr,
            power=power,
            total_steps=total_steps,
        )


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    return base_lr * (1.0 - step / total_steps) ** power


def adam_poly_step(model: ToySegModel, grads, opt: OptimizerState):
    """One Adam update at the polynomially decayed rate; updates in place."""
    if opt.step >= opt.total_steps:
        raise ConfigError(f"step {opt.step} beyond planned total {opt.total_steps}")
    if isinstance(grads, GradientVector):
        grads = unflatten(grads.data, model.params())
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergedError("non-finite gradient", opt.step)
    lr = poly_lr(opt.step, opt.total_steps, opt.base_lr, opt.power)
    t = opt.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    new = []
    for p, g, m, v in zip(model.params(), grads, opt.m, opt.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new.append((p - update).astype(p.dtype, copy=False))
    model.set_params(new)
    opt.step += 1
    return model, opt


@dataclass
class TrainResult:
    model: ToySegModel
    losses: list
    epoch_means: list


def train_task(
    model: ToySegModel,
    samples: list,
    rng: Rng,
    epochs: int = 30,
    batch_size: int = 8,
    learning_rate: float = 4e-4,
    poly_power: float = 0.9,
    teacher: Optional[ToySegModel] = None,
    replay: Optional[list] = None,
    replay_mix: str = "concat",
    replay_ratio: float = 0.5,
    distill_weight: float = 1.0,
) -> TrainResult:
    """Shuffled mini-batch Adam over the task data combined with replay samples.

    ``concat`` iterates the union of task and replay samples once per epoch;
    ``ratio`` iterates the task data and adds ``ceil(ratio * batch)`` replay
    samples drawn uniformly with replacement to every batch. With a teacher
    the CIL loss is used (old classes = the teacher's active classes).
    """
    replay = list(replay or [])
    if not samples and not replay:
        raise ConfigError("train_task needs a non-empty training set")
    model = model.copy()
    if epochs == 0:
        return TrainResult(model, [], [])
    old = sorted(teacher.active_classes) if teacher is not None else []
    pool = list(samples) + (replay if replay_mix == "concat" else [])
    n_batches = -(-len(pool) // batch_size)
    opt = OptimizerState.for_model(model, learning_rate, poly_power, epochs * n_batches)
    dtype = model.dtype
    images = {s.id: np.asarray(s.image, dtype=dtype) for s in pool + replay}
    teacher_cache: dict = {}
    losses, epoch_means = [], []
    for epoch in range(epochs):
        order = rng.permutation(len(pool))
        epoch_losses = []
        for b in range(n_batches):
            batch = [pool[i] for i in order[b * batch_size : (b + 1) * batch_size]]
            if replay_mix == "ratio" and replay:
                extra = int(np.ceil(replay_ratio * len(batch)))
                batch = batch + [replay[i] for i in rng.integers(0, len(replay), size=extra)]
            x = np.stack([images[s.id] for s in batch])
            y = np.stack([s.labels for s in batch])
            acts = forward(model, x)
            t_acts = None
            if old:
                t_acts = _teacher_acts(teacher, batch, images, teacher_cache)
            loss, dz = _logit_grad(acts, y, t_acts, old, distill_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite loss", opt.step)
            adam_poly_step(model, _backprop(model, acts, dz), opt)
            losses.append(loss)
            epoch_losses.append(loss)
        epoch_means.append(float(np.mean(epoch_losses)))
    return TrainResult(model, losses, epoch_means)


def _teacher_acts(teacher, batch, images, cache) -> Activations:
    logits = []
    for s in batch:
        if s.id not in cache:
            cache[s.id] = forward(teacher, images[s.id]).logits
        logits.append(cache[s.id])
    z = np.concatenate(logits)
    return Activations(None, None, None, z, None, teacher.active.copy())


# checkpoints ------------------------------------------------------------------


def save_checkpoint(model: ToySegModel, path, step: int = 0) -> Path:
    """Write ``<path>.bin`` (little-endian float32 blob) and ``<path>.json`` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.concatenate([p.astype("<f4").ravel() for p in model.params()])
    blob.tofile(path.with_suffix(".bin"))
    header = {
        "format": "replayseg-toyseg-v1",
        "param_order": list(PARAM_NAMES),
        "shapes": {n: list(p.shape) for n, p in zip(PARAM_NAMES, model.params())},
        "patch_size": model.patch_size,
        "channels": model.channels,
        "widths": list(model.widths),
        "active_classes": sorted(model.active_classes),
        "step": int(step),
        "blob": path.with_suffix(".bin").name,
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_checkpoint(path) -> tuple:
    """Inverse of :func:`save_checkpoint`; returns ``(model, step)``."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    blob = np.fromfile(path.parent / header["blob"], dtype="<f4")
    arrays, start = [], 0
    for name in header["param_order"]:
        shape = tuple(header["shapes"][name])
        size = int(np.prod(shape))
        arrays.append(blob[start : start + size].astype(np.float32).reshape(shape))
        start += size
    active = np.zeros(arrays[4].shape[1], dtype=bool)
    active[header["active_classes"]] = True
    model = ToySegModel(*arrays, patch_size=header["patch_size"], channels=header["channels"], active=active)
    return model, header["step"]


# estimator facade -------------------------------------------------------------


class PixelSegmenter(ClassifierMixin, BaseEstimator):
    """scikit-learn style wrapper around :class:`ToySegModel`.

    ``X`` is a (n, C, H, W) array of images in [0, 1] and ``y`` a (n, H, W)
    array of class ids with 255 as IGNORE. ``partial_fit`` continues training
    from the current weights; with ``distill=True`` the weights before the
    call act as the teacher for the newly supplied classes.
    """

    def __init__(
        self,
        num_classes=10,
        patch_size=5,
        hidden1=64,
        hidden2=32,
        epochs=30,
        batch_size=8,
        learning_rate=4e-4,
        poly_power=0.9,
        distill_weight=1.0,
        random_state=0,
    ):
        self.num_classes = num_classes
        self.patch_size = patch_size
        self.hidden1 = hidden1
        self.hidden2 = hidden2
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.poly_power = poly_power
        self.distill_weight = distill_weight
        self.random_state = random_state

    def _samples(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        if X.ndim != 4 or y.shape != (X.shape[0],) + X.shape[2:]:
            raise ShapeError(f"X must be (n, C, H, W) and y (n, H, W); got {X.shape} and {y.shape}")
        from .types import Sample, check_labels

        return [Sample(i, check_image(X[i]), check_labels(y[i], self.num_classes), 0) for i in range(len(X))]

    def fit(self, X, y, classes=None):
        rng = Rng(self.random_state)
        self.model_ = init_model(
            self.num_classes,
            rng.stream("init"),
            self.patch_size,
            (self.hidden1, self.hidden2),
            active_classes=classes,
        )
        self.n_fits_ = 0
        return self.partial_fit(X, y, classes=classes)

    def partial_fit(self, X, y, classes=None, distill=False):
        if not hasattr(self, "model_"):
            return self.fit(X, y, classes=classes)
        samples = self._samples(X, y)
        teacher = self.model_.copy() if distill else None
        if classes is not None:
            self.model_.activate(classes)
        result = train_task(
            self.model_,
            samples,
            Rng(self.random_state).stream("train", self.n_fits_),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            poly_power=self.poly_power,
            teacher=teacher,
            distill_weight=self.distill_weight,
        )
        self.model_ = result.model
        self.loss_curve_ = result.losses
        self.n_fits_ += 1
        self.classes_ = np.array(sorted(self.model_.active_classes))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = _as_batch(X, self.model_.channels)
        acts = forward(self.model_, X.astype(np.float32))
        b, h, w = acts.shape
        return acts.posterior.reshape(b, h, w, -1)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, _as_batch(X, self.model_.channels).astype(np.float32))

    def transform(self, X):
        """Per-image embeddings (spatial mean of the second hidden layer)."""
        check_is_fitted(self, "model_")
        return np.stack([embed(self.model_, x) for x in _as_batch(X, self.model_.channels)])

    def score(self, X, y, sample_weight=None):
        from .metrics import confusion, miou

        pred = self.predict(X)
        cm = confusion(pred, np.asarray(y), self.num_classes)
        value = miou(cm, self.classes_).value
        return 0.0 if value is None else value
