"""Fixed-capacity replay memory split into per-task quotas."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .types import ReplaySegError, Rng, class_histogram

MANIFEST_VERSION = 1


class CapacityError(ReplaySegError, AssertionError):
    pass


@dataclass(frozen=True)
class BufferEntry:
    sample: object
    score: Optional[float]
    inserted_at: int
    rank: int = 0

    @property
    def id(self) -> int:
        return self.sample.id


@dataclass
class ReplayBuffer:
    capacity: int
    num_classes: int
    policy: str = "random"
    entries: list = field(default_factory=list)
    quotas: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def tasks(self) -> list:
        return sorted({e.inserted_at for e in self.entries})

    def task_entries(self, task: int) -> list:
        return [e for e in self.entries if e.inserted_at == task]

    def counts(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out[e.inserted_at] = out.get(e.inserted_at, 0) + 1
        return out

    def samples(self) -> list:
        return [e.sample for e in self.entries]

    def histogram(self) -> np.ndarray:
        total = np.zeros(self.num_classes, dtype=np.int64)
        for e in self.entries:
            total += class_histogram(e.sample.labels, self.num_classes).counts
        return total

    def check_capacity(self) -> None:
        if len(self.entries) > self.capacity:
            raise CapacityError(f"buffer holds {len(self.entries)} entries, capacity {self.capacity}")


def quota(capacity: int, num_tasks: int, available=None) -> list:
    """Per-task slot counts: ``capacity // K`` each, remainder to the earliest tasks.

    With ``available`` (samples on offer per task), unusable slots move to the
    earliest tasks that still have samples, so the total is
    ``min(capacity, sum(available))``.
    """
    if num_tasks < 1:
        raise ValueError("quota needs at least one task")
    base, extra = divmod(capacity, num_tasks)
    counts = [base + (1 if k < extra else 0) for k in range(num_tasks)]
    if available is None:
        return counts
    available = list(available)
    if len(available) != num_tasks:
        raise ValueError("available needs one entry per task")
    counts = [min(c, a) for c, a in zip(counts, available)]
    spare = min(capacity, sum(available)) - sum(counts)
    while spare > 0:
        for k in range(num_tasks):
            if spare and counts[k] < available[k]:
                counts[k] += 1
                spare -= 1
    return counts


ShrinkHook = Callable[[list, int], list]


def settle_new_task(
    buffer: ReplayBuffer,
    new_entries: list,
    shrink: ShrinkHook,
    on_change: Optional[Callable[[ReplayBuffer], None]] = None,
) -> ReplayBuffer:
    """Shrink old tasks to their new quotas, then insert the new task's entries.

    ``shrink(entries, n)`` is the policy's eviction rule and must return ``n``
    of the given entries. The capacity invariant is checked after every
    mutation and ``on_change`` (if given) sees every intermediate state.
    """
    if not new_entries:
        return buffer
    new_task = new_entries[0].inserted_at
    if any(e.inserted_at != new_task for e in new_entries):
        raise ValueError("new entries must come from a single task")
    if new_task in buffer.tasks:
        raise ValueError(f"task {new_task} is already in the buffer")
    old_tasks = buffer.tasks
    offered = [len(buffer.task_entries(t)) for t in old_tasks] + [len(new_entries)]
    quotas = quota(buffer.capacity, len(old_tasks) + 1, offered)
    out = ReplayBuffer(buffer.capacity, buffer.num_classes, buffer.policy, list(buffer.entries), {}, list(buffer.warnings))

    def changed():
        out.check_capacity()
        if on_change is not None:
            on_change(out)

    for task, q in zip(old_tasks, quotas):
        held = out.task_entries(task)
        if len(held) > q:
            kept = shrink(held, q)
            if len(kept) != q or not {e.id for e in kept} <= {e.id for e in held}:
                raise ReplaySegError(f"eviction hook returned {len(kept)} entries, expected {q} of the held ones")
            keep_ids = {e.id for e in kept}
            out.entries = [e for e in out.entries if e.inserted_at != task or e.id in keep_ids]
            changed()
        out.quotas[task] = q
    q_new = quotas[-1]
    if len(new_entries) > q_new:
        out.warnings.append(f"task {new_task}: policy offered {len(new_entries)} entries for a quota of {q_new}; truncated")
        new_entries = new_entries[:q_new]
    for e in new_entries:
        out.entries.append(e)
        changed()
    out.quotas[new_task] = q_new
    return out


def retrieve_uniform(buffer: ReplayBuffer, n: int, rng: Rng) -> list:
    """``n`` draws with replacement, uniform over the buffer entries."""
    if n <= 0 or not buffer.entries:
        return []
    idx = rng.integers(0, len(buffer.entries), size=n)
    return [buffer.entries[i].sample for i in idx]


def manifest(buffer: ReplayBuffer) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "capacity": buffer.capacity,
        "num_classes": buffer.num_classes,
        "policy": buffer.policy,
        "quotas": {str(k): v for k, v in sorted(buffer.quotas.items())},
        "entries": [
            {
                "id": int(e.id),
                "task_id": int(e.sample.task_id),
                "inserted_at": int(e.inserted_at),
                "score": None if e.score is None else float(e.score),
                "rank": int(e.rank),
            }
            for e in buffer.entries
        ],
        "histogram": [int(c) for c in buffer.histogram()],
        "warnings": list(buffer.warnings),
    }


def write_manifest(buffer: ReplayBuffer, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest(buffer), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def buffer_from_manifest(record: dict, samples_by_id: dict) -> ReplayBuffer:
    entries = [
        BufferEntry(samples_by_id[e["id"]], e["score"], e["inserted_at"], e.get("rank", 0)) for e in record["entries"]
    ]
    return ReplayBuffer(
        capacity=record["capacity"],
        num_classes=record["num_classes"],
        policy=record["policy"],
        entries=entries,
        quotas={int(k): v for k, v in record["quotas"].items()},
        warnings=list(record["warnings"]),
    )
