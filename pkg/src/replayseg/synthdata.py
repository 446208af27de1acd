"""Procedural segmentation scenes for class- and domain-incremental scenarios.

Every scene is a textured background (class 0) with a handful of coloured,
textured shapes painted on top in order. Each class owns a hue and a texture
pattern, so a small patch classifier can separate them. Domains differ by a
photometric transform (hue rotation about the grey axis, 3x3 box blur and
additive Gaussian noise) that leaves the label semantics untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import (
    CLASS_INCREMENTAL,
    DOMAIN_INCREMENTAL,
    IGNORE,
    ConfigError,
    Rng,
    Sample,
    TaskDef,
)

SHAPES = ("rectangle", "disc", "triangle", "ring", "stripe_band")
BACKGROUND = 0


@dataclass(frozen=True)
class DomainParams:
    palette_shift: float = 0.0
    noise_sigma: float = 0.0
    blur: bool = False


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    class_id: int
    top: int
    left: int
    height: int
    width: int
    jitter: tuple = (0.0, 0.0, 0.0)
    phase: int = 0


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    num_classes: int
    objects: tuple = ()
    labeled_classes: frozenset = frozenset()
    domain: DomainParams = DomainParams()
    background_phase: int = 0

    def validate(self) -> None:
        for obj in self.objects:
            if obj.kind not in SHAPES:
                raise ConfigError(f"unknown shape {obj.kind!r}")
            if not 0 <= obj.class_id < self.num_classes:
                raise ConfigError(f"object class {obj.class_id} outside [0, {self.num_classes})")
            if obj.top < 0 or obj.left < 0 or obj.top + obj.height > self.height or obj.left + obj.width > self.width:
                raise ConfigError(f"object {obj} exceeds the canvas")


@dataclass
class ScenarioSpec:
    kind: str
    num_classes: int
    height: int = 32
    width: int = 32
    train_per_task: tuple = (200, 200, 200)
    val_per_task: tuple = (50, 50, 50)
    labeled: tuple = ()
    exclusive_classes: frozenset = frozenset()
    exclusive_task: int = 1
    domains: tuple = ()
    class_weights: tuple = ()
    objects_per_image: tuple = (2, 5)

    @property
    def num_tasks(self) -> int:
        return len(self.labeled)

    def validate(self) -> None:
        if self.kind not in (CLASS_INCREMENTAL, DOMAIN_INCREMENTAL):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        n = self.num_tasks
        if n == 0:
            raise ConfigError("scenario needs at least one task")
        if len(self.train_per_task) != n or len(self.val_per_task) != n or len(self.domains) != n:
            raise ConfigError("per-task lists must all have one entry per task")
        every = set().union(*self.labeled)
        if any(c < 0 or c >= self.num_classes for c in every):
            raise ConfigError(f"scenario labels classes outside [0, {self.num_classes})")
        if len(self.class_weights) != self.num_classes:
            raise ConfigError("class_weights needs one entry per class")
        if self.kind == CLASS_INCREMENTAL:
            seen: set = set()
            for s in self.labeled:
                if seen & set(s):
                    raise ConfigError("class-incremental labeled sets must be disjoint")
                seen |= set(s)
            if self.exclusive_classes and not set(self.exclusive_classes) <= set(self.labeled[self.exclusive_task]):
                raise ConfigError("exclusive classes must be labeled in the exclusive task")
            if BACKGROUND in self.exclusive_classes:
                raise ConfigError("background cannot be exclusive")
        else:
            if any(set(s) != set(self.labeled[0]) for s in self.labeled):
                raise ConfigError("domain-incremental tasks must share the labeled class set")
            if self.exclusive_classes:
                raise ConfigError("domain-incremental scenarios have no exclusive classes")


def long_tail_weights(num_classes: int, ratio: float = 10.0) -> tuple:
    """Placement weights for object classes 1..C-1, geometric from 1 down to 1/ratio."""
    n = num_classes - 1
    w = [0.0] + [ratio ** (-(i / max(n - 1, 1))) for i in range(n)]
    return tuple(w)


def split_classes(num_classes: int, num_tasks: int) -> list:
    """Contiguous class splits; earlier tasks take the remainder."""
    base, extra = divmod(num_classes, num_tasks)
    out, start = [], 0
    for k in range(num_tasks):
        size = base + (1 if k < extra else 0)
        out.append(frozenset(range(start, start + size)))
        start += size
    return out


def default_scenario_spec(
    kind: str = CLASS_INCREMENTAL,
    num_classes: int = 10,
    height: int = 32,
    width: int = 32,
    train_per_task: int = 200,
    val_per_task: int = 50,
    num_tasks: int | None = None,
    num_exclusive: int = 2,
    palette_shift: float = 0.5,  # under one hue step (2*pi/9), so the shift is not a class relabelling
    noise_sigma: float = 0.05,
) -> ScenarioSpec:
    if kind in ("class", CLASS_INCREMENTAL):
        k = num_tasks or 3
        labeled = split_classes(num_classes, k)
        exclusive_task = 1 if k > 1 else 0
        excl = frozenset(sorted(labeled[exclusive_task] - {BACKGROUND})[-num_exclusive:]) if num_exclusive and k > 2 else frozenset()
        return ScenarioSpec(
            kind=CLASS_INCREMENTAL,
            num_classes=num_classes,
            height=height,
            width=width,
            train_per_task=(train_per_task,) * k,
            val_per_task=(val_per_task,) * k,
            labeled=tuple(labeled),
            exclusive_classes=excl,
            exclusive_task=exclusive_task,
            domains=(DomainParams(),) * k,
            class_weights=long_tail_weights(num_classes),
        )
    if kind in ("domain", DOMAIN_INCREMENTAL):
        k = num_tasks or 2
        domains = [DomainParams()]
        for i in range(1, k):
            domains.append(DomainParams(palette_shift=palette_shift * i, noise_sigma=noise_sigma, blur=True))
        return ScenarioSpec(
            kind=DOMAIN_INCREMENTAL,
            num_classes=num_classes,
            height=height,
            width=width,
            train_per_task=(train_per_task,) * k,
            val_per_task=(val_per_task,) * k,
            labeled=(frozenset(range(num_classes)),) * k,
            domains=tuple(domains),
            class_weights=long_tail_weights(num_classes),
        )
    raise ConfigError(f"unknown scenario kind {kind!r}")


# appearance -----------------------------------------------------------------


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    if class_id == BACKGROUND:
        return np.array([0.45, 0.42, 0.40])
    hue = 2.0 * math.pi * (class_id - 1) / max(num_classes - 1, 1)
    return 0.5 + 0.32 * np.array([math.cos(hue), math.cos(hue - 2 * math.pi / 3), math.cos(hue + 2 * math.pi / 3)])


def class_texture(class_id: int, height: int, width: int, phase: int = 0) -> np.ndarray:
    """Zero-mean luminance modulation pattern in [-1, 1] for a class."""
    yy, xx = np.mgrid[0:height, 0:width]
    kind = class_id % 4
    if class_id == BACKGROUND:
        return np.zeros((height, width))
    if kind == 0:
        return np.where(((yy + phase) // 2) % 2 == 0, 1.0, -1.0)
    if kind == 1:
        return np.where(((xx + phase) // 2) % 2 == 0, 1.0, -1.0)
    if kind == 2:
        return np.where(((yy + xx + phase) // 2) % 2 == 0, 1.0, -1.0)
    return np.zeros((height, width))


def shape_mask(obj: ObjectSpec, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    if obj.kind == "stripe_band":
        mask[obj.top : obj.top + obj.height, :] = True
        return mask
    ys = np.arange(obj.top, obj.top + obj.height)[:, None] + 0.5
    xs = np.arange(obj.left, obj.left + obj.width)[None, :] + 0.5
    cy = obj.top + obj.height / 2.0
    cx = obj.left + obj.width / 2.0
    ry, rx = obj.height / 2.0, obj.width / 2.0
    if obj.kind == "rectangle":
        local = np.ones((obj.height, obj.width), dtype=bool)
    elif obj.kind in ("disc", "ring"):
        r2 = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
        local = r2 <= 1.0
        if obj.kind == "ring":
            local &= r2 >= 0.3
    elif obj.kind == "triangle":
        t = (ys - obj.top) / obj.height
        local = np.abs(xs - cx) <= t * rx
    else:
        raise ConfigError(f"unknown shape {obj.kind!r}")
    mask[obj.top : obj.top + obj.height, obj.left : obj.left + obj.width] = local
    return mask


def _grey_axis_rotation(theta: float) -> np.ndarray:
    axis = np.ones(3) / math.sqrt(3.0)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


def _box_blur(image: np.ndarray) -> np.ndarray:
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(image)
    h, w = image.shape[1:]
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy : dy + h, dx : dx + w]
    return out / 9.0


def apply_domain(image: np.ndarray, domain: DomainParams, rng: Rng) -> np.ndarray:
    out = image
    if domain.palette_shift:
        rot = _grey_axis_rotation(domain.palette_shift)
        out = 0.5 + np.einsum("ij,jhw->ihw", rot, out - 0.5)
    if domain.blur:
        out = _box_blur(out)
    if domain.noise_sigma > 0:
        out = out + rng.normal(0.0, domain.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_sample(scene: SceneSpec, rng: Rng):
    """Render a scene to ``(image, labels, true_labels)``.

    Objects are painted in list order, so later ones occlude earlier ones.
    ``labels`` equals ``true_labels`` with classes outside
    ``scene.labeled_classes`` set to IGNORE.
    """
    h, w, c = scene.height, scene.width, scene.num_classes
    true = np.full((h, w), BACKGROUND, dtype=np.uint8)
    image = np.empty((3, h, w))
    image[:] = class_color(BACKGROUND, c)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w]
    image += 0.04 * np.sin((yy + scene.background_phase) * 0.7)[None] * np.cos(xx * 0.5)[None]
    for obj in scene.objects:
        mask = shape_mask(obj, h, w)
        color = class_color(obj.class_id, c) + np.asarray(obj.jitter)
        tex = class_texture(obj.class_id, h, w, obj.phase)
        painted = color[:, None, None] + 0.12 * tex[None]
        image[:, mask] = painted[:, mask]
        true[mask] = obj.class_id
    image = apply_domain(np.clip(image, 0.0, 1.0), scene.domain, rng)
    labels = true.copy()
    if scene.labeled_classes is not None:
        keep = np.isin(true, np.fromiter(scene.labeled_classes, dtype=np.int64, count=len(scene.labeled_classes)))
        labels[~keep] = IGNORE
    return image.astype(np.float32), labels, true


def sample_scene(spec: ScenarioSpec, task: int, rng: Rng) -> SceneSpec:
    h, w = spec.height, spec.width
    allowed = [cl for cl in range(1, spec.num_classes)]
    if spec.kind == CLASS_INCREMENTAL and task != spec.exclusive_task:
        allowed = [cl for cl in allowed if cl not in spec.exclusive_classes]
    weights = np.array([spec.class_weights[cl] for cl in allowed], dtype=float)
    own = [cl for cl in sorted(spec.labeled[task]) if cl != BACKGROUND and cl in allowed]
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    objects = []
    for i in range(n_obj):
        if i == 0 and own and spec.kind == CLASS_INCREMENTAL:
            ow = np.array([spec.class_weights[cl] for cl in own])
            cls = own[int(rng.choice(len(own), p=ow / ow.sum()))]
        else:
            cls = allowed[int(rng.choice(len(allowed), p=weights / weights.sum()))]
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        oh = int(rng.integers(max(3, h // 6), max(4, h // 3) + 1))
        ow_ = int(rng.integers(max(3, w // 6), max(4, w // 3) + 1))
        if kind == "stripe_band":
            oh = max(2, oh // 2)
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow_ + 1))
        jitter = tuple(float(v) for v in rng.uniform(-0.04, 0.04, size=3))
        objects.append(ObjectSpec(kind, cls, top, left, oh, ow_, jitter, int(rng.integers(0, 4))))
    # paint the task's own object last so it stays visible
    objects = objects[1:] + objects[:1]
    return SceneSpec(
        height=h,
        width=w,
        num_classes=spec.num_classes,
        objects=tuple(objects),
        labeled_classes=frozenset(spec.labeled[task]),
        domain=spec.domains[task],
        background_phase=int(rng.integers(0, 9)),
    )


def generate_scenario(spec: ScenarioSpec, rng: Rng) -> list:
    """Build the task sequence; each sample draws from its own id-keyed substream."""
    spec.validate()
    tasks = []
    next_id = 0
    for k in range(spec.num_tasks):
        splits = {}
        for split, count in (("train", spec.train_per_task[k]), ("val", spec.val_per_task[k])):
            samples = []
            for _ in range(count):
                sid = next_id
                next_id += 1
                srng = rng.stream("sample", sid)
                scene = sample_scene(spec, k, srng)
                image, labels, true = render_sample(scene, srng.stream("photometric"))
                samples.append(Sample(id=sid, image=image, labels=labels, task_id=k, true_labels=true))
            splits[split] = samples
        tasks.append(
            TaskDef(
                task_id=k,
                train_samples=splits["train"],
                val_samples=splits["val"],
                labeled_classes=spec.labeled[k],
                scenario=spec.kind,
                exclusive_classes=spec.exclusive_classes if k == spec.exclusive_task else frozenset(),
            )
        )
    return tasks


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "kind": spec.kind,
        "num_classes": spec.num_classes,
        "height": spec.height,
        "width": spec.width,
        "train_per_task": list(spec.train_per_task),
        "val_per_task": list(spec.val_per_task),
        "labeled": [sorted(s) for s in spec.labeled],
        "exclusive_classes": sorted(spec.exclusive_classes),
        "exclusive_task": spec.exclusive_task,
        "domains": [
            {"palette_shift": d.palette_shift, "noise_sigma": d.noise_sigma, "blur": d.blur} for d in spec.domains
        ],
        "class_weights": list(spec.class_weights),
        "objects_per_image": list(spec.objects_per_image),
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    return ScenarioSpec(
        kind=d["kind"],
        num_classes=d["num_classes"],
        height=d["height"],
        width=d["width"],
        train_per_task=tuple(d["train_per_task"]),
        val_per_task=tuple(d["val_per_task"]),
        labeled=tuple(frozenset(s) for s in d["labeled"]),
        exclusive_classes=frozenset(d["exclusive_classes"]),
        exclusive_task=d["exclusive_task"],
        domains=tuple(DomainParams(**x) for x in d["domains"]),
        class_weights=tuple(d["class_weights"]),
        objects_per_image=tuple(d["objects_per_image"]),
    )
