"""On-disk dataset format.

A dataset directory holds ``index.json`` plus, per sample, a raw image file
(little-endian float32, channel-major) and raw label files (uint8)::

    index.json
    samples/000017.img.f32
    samples/000017.lbl.u8
    samples/000017.true.u8      # generator ground truth, optional

``index.json`` lists every sample (id, task, split, shape, file names),
the class names and the per-task metadata needed to rebuild the TaskDefs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .types import Sample, TaskDef

FORMAT_VERSION = 1


def default_class_names(num_classes: int) -> list:
    return ["background"] + [f"class_{c}" for c in range(1, num_classes)]


def write_dataset(tasks: list, out_dir, num_classes: int, class_names=None, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for task in tasks:
        for split, samples in (("train", task.train_samples), ("val", task.val_samples)):
            for s in samples:
                stem = f"{s.id:06d}"
                c, h, w = s.image.shape
                np.asarray(s.image, dtype="<f4").tofile(out / "samples" / f"{stem}.img.f32")
                np.asarray(s.labels, dtype=np.uint8).tofile(out / "samples" / f"{stem}.lbl.u8")
                entry = {
                    "id": int(s.id),
                    "task_id": int(s.task_id),
                    "split": split,
                    "channels": int(c),
                    "height": int(h),
                    "width": int(w),
                    "image": f"samples/{stem}.img.f32",
                    "labels": f"samples/{stem}.lbl.u8",
                }
                if s.true_labels is not None:
                    np.asarray(s.true_labels, dtype=np.uint8).tofile(out / "samples" / f"{stem}.true.u8")
                    entry["true_labels"] = f"samples/{stem}.true.u8"
                entries.append(entry)
    index = {
        "format_version": FORMAT_VERSION,
        "num_classes": int(num_classes),
        "class_names": list(class_names or default_class_names(num_classes)),
        "tasks": [
            {
                "task_id": int(t.task_id),
                "scenario": t.scenario,
                "labeled_classes": sorted(int(c) for c in t.labeled_classes),
                "exclusive_classes": sorted(int(c) for c in t.exclusive_classes),
            }
            for t in tasks
        ],
        "samples": entries,
    }
    if extra:
        index.update(extra)
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(path) -> tuple:
    """Load a dataset directory; returns ``(tasks, index)``."""
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    by_task: dict = {t["task_id"]: {"train": [], "val": []} for t in index["tasks"]}
    for e in index["samples"]:
        shape = (e["channels"], e["height"], e["width"])
        image = np.fromfile(root / e["image"], dtype="<f4").reshape(shape)
        labels = np.fromfile(root / e["labels"], dtype=np.uint8).reshape(shape[1:])
        true = None
        if "true_labels" in e:
            true = np.fromfile(root / e["true_labels"], dtype=np.uint8).reshape(shape[1:])
        sample = Sample(id=e["id"], image=image.astype(np.float32), labels=labels, task_id=e["task_id"], true_labels=true)
        by_task[e["task_id"]][e["split"]].append(sample)
    tasks = []
    for t in index["tasks"]:
        group = by_task[t["task_id"]]
        tasks.append(
            TaskDef(
                task_id=t["task_id"],
                train_samples=sorted(group["train"], key=lambda s: s.id),
                val_samples=sorted(group["val"], key=lambda s: s.id),
                labeled_classes=frozenset(t["labeled_classes"]),
                scenario=t["scenario"],
                exclusive_classes=frozenset(t.get("exclusive_classes", [])),
            )
        )
    return tasks, index


def dataset_digest(path) -> str:
    """SHA-256 over index.json and every sample file, in sorted order."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "scenario.json"):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def scenario_digest(tasks: list) -> str:
    """SHA-256 over every sample's id, task, image and label bytes."""
    h = hashlib.sha256()
    for t in tasks:
        h.update(f"{t.task_id}:{sorted(t.labeled_classes)}".encode())
        for s in list(t.train_samples) + list(t.val_samples):
            h.update(str(s.id).encode())
            h.update(np.asarray(s.image, dtype="<f4").tobytes())
            h.update(np.asarray(s.labels, dtype=np.uint8).tobytes())
            if s.true_labels is not None:
                h.update(np.asarray(s.true_labels, dtype=np.uint8).tobytes())
    return h.hexdigest()
