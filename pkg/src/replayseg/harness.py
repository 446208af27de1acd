"""End-to-end continual-learning runs, experiment grids and run comparison.

A run directory contains::

    config.txt                 configuration echo (input bytes when read from a file)
    metrics.json               per-step evaluation records, CKA, status
    confusion_<k>.csv          C x C confusion after task k (1-based)
    cka.csv                    step,layer,value (snapshot k-1 vs k on task-1 val pixels)
    model_<k>.bin/.json        checkpoint after task k
    buffer_manifest_<k>.json   buffer after settling task k
    buffer_manifest.json       latest buffer
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .buffer import ReplayBuffer, manifest, quota, settle_new_task, write_manifest
from .config import RunConfig, config_from_mapping, parse_key_values
from .datasets import scenario_digest
from .metrics import cka_drift, confusion, miou, recency_bias
from .model import init_model, predict_labels, save_checkpoint, train_task
from .policies import SampleSelector
from .synthdata import default_scenario_spec, generate_scenario
from .types import (
    CLASS_INCREMENTAL,
    IGNORE,
    ConfigError,
    ReplaySegError,
    Rng,
    TrainingDivergedError,
    check_task_sequence,
)

log = logging.getLogger(__name__)


class InvariantError(ReplaySegError, AssertionError):
    pass


@dataclass
class RunArtifacts:
    run_dir: Optional[Path]
    config: RunConfig
    records: list
    cka: dict
    confusions: list
    models: list
    buffer: Optional[ReplayBuffer]
    manifests: list
    checkpoints: list = field(default_factory=list)
    digest: str = ""
    status: str = "ok"

    @property
    def final(self) -> dict:
        return self.records[-1]


def make_scenario(config: RunConfig) -> list:
    spec = default_scenario_spec(
        config.scenario_kind,
        num_classes=config.num_classes,
        height=config.height,
        width=config.width,
        train_per_task=config.train_per_task,
        val_per_task=config.val_per_task,
    )
    return generate_scenario(spec, Rng(config.effective_data_seed).stream("data"))


def _eval_labels(sample, seen: set) -> np.ndarray:
    truth = sample.true_labels if sample.true_labels is not None else sample.labels
    out = truth.copy()
    out[~np.isin(truth, sorted(seen))] = IGNORE
    return out


def _value(m) -> Optional[float]:
    return None if m.value is None else round(m.value, 12)


def evaluate(model, tasks: list, upto: int, seen: set, num_classes: int) -> tuple:
    """Confusion and metrics on the validation sets of tasks ``0..upto``.

    Ground truth pixels of classes not yet seen are ignored.
    """
    per_set = []
    for t in tasks[: upto + 1]:
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        for s in t.val_samples:
            cm += confusion(predict_labels(model, s.image), _eval_labels(s, seen), num_classes)
        per_set.append(cm)
    total = sum(per_set)
    all_m = miou(total, seen)
    record = {
        "miou_all": _value(all_m),
        "miou_subsets": {f"S{t.task_id + 1}": _value(miou(total, t.labeled_classes)) for t in tasks[: upto + 1]},
        "miou_val_sets": {f"T{t.task_id + 1}": _value(miou(cm, seen)) for t, cm in zip(tasks, per_set)},
        "per_class_iou": {str(c): (None if v is None else round(v, 12)) for c, v in all_m.per_class.items()},
        "excluded_classes": all_m.excluded,
        "pixels_evaluated": int(total.sum()),
    }
    exclusive = sorted(set().union(*(t.exclusive_classes for t in tasks)))
    if exclusive and set(exclusive) <= seen:
        record["miou_exclusive"] = _value(miou(total, exclusive))
    if tasks[0].scenario == CLASS_INCREMENTAL and upto > 0:
        newest = tasks[upto].labeled_classes
        bias = {"old": recency_bias(total, seen - newest, newest)}
        for t in tasks[:upto]:
            bias[f"S{t.task_id + 1}"] = recency_bias(total, t.labeled_classes, newest)
        if exclusive and not set(exclusive) & newest:
            bias["exclusive"] = recency_bias(total, exclusive, newest)
        record["recency_bias"] = {k: (None if v is None else round(v, 12)) for k, v in bias.items()}
    return record, total


def _write_confusion(cm: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(cm.tolist())


def _read_confusion(path: Path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[int(v) for v in row] for row in csv.reader(fh)], dtype=np.int64)


def _selector(config: RunConfig) -> SampleSelector:
    return SampleSelector(
        policy=config.policy, th=config.th, cmp=config.cmp, reduced_dim=config.rss_dim, direction=config.direction
    )


def run_continual(
    config: RunConfig,
    tasks: list,
    out_dir=None,
    config_text: str | None = None,
    on_buffer_change: Callable | None = None,
) -> RunArtifacts:
    """Train on the tasks in order with replay, evaluating after every task.

    Per task: train on its data plus the buffer (with a frozen teacher when
    distillation is on and old classes exist), evaluate on all seen
    validation sets, select replay samples from this task only, then settle
    the buffer.
    """
    check_task_sequence(tasks)
    config.check_tasks(len(tasks))
    C = config.num_classes
    class_inc = tasks[0].scenario == CLASS_INCREMENTAL
    rng = Rng(config.seed)
    model = init_model(
        C,
        rng.stream("init"),
        config.patch_size,
        (config.hidden1, config.hidden2),
        active_classes=tasks[0].labeled_classes if class_inc else None,
        scale=config.init_scale,
    )
    selector = _selector(config)
    buffer = ReplayBuffer(config.buffer_size, C, config.policy)
    run_dir = Path(out_dir) if out_dir is not None else None
    art = RunArtifacts(run_dir, config, [], {}, [], [], buffer, [], digest=scenario_digest(tasks))
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config_text if config_text is not None else config.to_text())

    def capacity_probe(buf):
        if len(buf) > buf.capacity:
            raise InvariantError("buffer capacity exceeded during settle")
        if on_buffer_change is not None:
            on_buffer_change(buf)

    seen: set = set()
    try:
        for k, task in enumerate(tasks):
            teacher = model.copy() if (config.uses_distillation and k > 0 and seen) else None
            seen |= set(task.labeled_classes)
            model.activate(task.labeled_classes)
            result = train_task(
                model,
                task.train_samples,
                rng.stream("train", k),
                epochs=config.epochs,
                batch_size=config.batch_size,
                learning_rate=config.learning_rate,
                poly_power=config.poly_power,
                teacher=teacher,
                replay=buffer.samples(),
                replay_mix=config.replay_mix,
                replay_ratio=config.replay_ratio,
                distill_weight=config.distill_weight,
            )
            model = result.model
            record, cm = evaluate(model, tasks, k, seen, C)
            record["step"] = k + 1
            record["train"] = {
                "steps": len(result.losses),
                "first_epoch_loss": result.epoch_means[0] if result.epoch_means else None,
                "last_epoch_loss": result.epoch_means[-1] if result.epoch_means else None,
                "replay_samples": len(buffer),
                "distillation": teacher is not None,
            }
            if config.buffer_size > 0 and config.policy != "none":
                offered = [len(buffer.task_entries(t)) for t in buffer.tasks] + [len(task.train_samples)]
                q = quota(config.buffer_size, len(offered), offered)[-1]
                # selection sees only this task's training data, the buffer and the model
                sel = selector.select(
                    list(task.train_samples),
                    model,
                    q,
                    rng.stream("select", k),
                    buffer=buffer,
                    classes=task.labeled_classes,
                    seen_classes=seen,
                )
                if any(e.sample.task_id != task.task_id for e in sel.chosen):
                    raise InvariantError("selection returned samples from another task")
                evict_rng = rng.stream("evict", k)
                buffer = settle_new_task(
                    buffer, sel.chosen, lambda entries, n: selector.shrink(entries, n, evict_rng), capacity_probe
                )
                buffer.warnings.extend(sel.warnings)
                if any(e.inserted_at > task.task_id for e in buffer.entries):
                    raise InvariantError("buffer holds entries from future tasks")
            record["buffer"] = {str(t): n for t, n in sorted(buffer.counts().items())}
            art.records.append(record)
            art.confusions.append(cm)
            art.models.append(model.copy())
            art.manifests.append(manifest(buffer))
            if k > 0:
                curve = cka_drift(art.models[k - 1], model, tasks[0].val_samples, rng.stream("cka"), config.cka_pixels)
                art.cka[k + 1] = {name: round(v, 12) for name, v in curve.items()}
            if run_dir is not None:
                _write_confusion(cm, run_dir / f"confusion_{k + 1}.csv")
                art.checkpoints.append(save_checkpoint(model, run_dir / f"model_{k + 1}", step=k + 1))
                write_manifest(buffer, run_dir / f"buffer_manifest_{k + 1}.json")
                write_manifest(buffer, run_dir / "buffer_manifest.json")
    except TrainingDivergedError as exc:
        art.status = f"diverged: {exc}"
        if run_dir is not None:
            _write_metrics(art, tasks)
        raise
    art.buffer = buffer
    if run_dir is not None:
        _write_metrics(art, tasks)
    return art


def run_offline(config: RunConfig, tasks: list, out_dir=None, config_text: str | None = None) -> RunArtifacts:
    """Joint training on every task's data with all labeled classes (upper bound)."""
    check_task_sequence(tasks)
    C = config.num_classes
    every = set().union(*(t.labeled_classes for t in tasks))
    rng = Rng(config.seed)
    model = init_model(
        C, rng.stream("init"), config.patch_size, (config.hidden1, config.hidden2), active_classes=every,
        scale=config.init_scale,
    )
    joint = []
    for t in tasks:
        for s in t.train_samples:
            joint.append(type(s)(s.id, s.image, _eval_labels(s, every), s.task_id, s.true_labels))
    run_dir = Path(out_dir) if out_dir is not None else None
    art = RunArtifacts(run_dir, config, [], {}, [], [], None, [], digest=scenario_digest(tasks))
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config_text if config_text is not None else config.to_text())
    result = train_task(
        model,
        joint,
        rng.stream("train", 0),
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        poly_power=config.poly_power,
    )
    model = result.model
    record, cm = evaluate(model, tasks, len(tasks) - 1, every, C)
    record["step"] = len(tasks)
    record["train"] = {
        "steps": len(result.losses),
        "first_epoch_loss": result.epoch_means[0] if result.epoch_means else None,
        "last_epoch_loss": result.epoch_means[-1] if result.epoch_means else None,
        "replay_samples": 0,
        "distillation": False,
    }
    record["buffer"] = {}
    art.records.append(record)
    art.confusions.append(cm)
    art.models.append(model)
    if run_dir is not None:
        _write_confusion(cm, run_dir / f"confusion_{len(tasks)}.csv")
        art.checkpoints.append(save_checkpoint(model, run_dir / f"model_{len(tasks)}", step=len(tasks)))
        _write_metrics(art, tasks, mode="offline")
    return art


def _write_metrics(art: RunArtifacts, tasks: list, mode: str = "continual") -> None:
    cfg = art.config
    payload = {
        "mode": mode,
        "status": art.status,
        "seed": cfg.seed,
        "data_seed": cfg.effective_data_seed,
        "scenario": tasks[0].scenario,
        "num_tasks": len(tasks),
        "labeled_classes": [sorted(t.labeled_classes) for t in tasks],
        "exclusive_classes": sorted(set().union(*(t.exclusive_classes for t in tasks))),
        "epochs_per_task": cfg.epochs,
        "policy": cfg.policy,
        "buffer_size": cfg.buffer_size,
        "dataset_digest": art.digest,
        "config": cfg.to_dict(),
        "steps": art.records,
        "cka": {str(k): v for k, v in sorted(art.cka.items())},
    }
    (art.run_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if art.cka:
        with open(art.run_dir / "cka.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "layer", "value"])
            for step, curve in sorted(art.cka.items()):
                for layer, v in curve.items():
                    w.writerow([step, layer, repr(v)])


# grids --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    policy: str
    params: tuple
    buffer_size: int
    seed: int

    @property
    def name(self) -> str:
        extra = "".join(f"_{k}{v}" for k, v in self.params)
        return f"{self.policy}{extra}_M{self.buffer_size}_s{self.seed}"

    def params_text(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.params)


@dataclass
class ExperimentGrid:
    base: RunConfig
    cells: list
    n_jobs: int = 1
    offline: bool = False


def parse_policy_spec(spec: str) -> tuple:
    """``"div_class_bal:th=0.4;cmp=3"`` -> ``("div_class_bal", (("th", "0.4"), ("cmp", "3")))``."""
    name, _, rest = spec.strip().partition(":")
    params = tuple(tuple(p.split("=", 1)) for p in rest.split(";") if p.strip())
    return name.strip(), tuple((k.strip(), v.strip()) for k, v in params)


def load_grid(path) -> ExperimentGrid:
    """Grid file: RunConfig keys plus ``policies``, ``buffer_sizes``, ``seeds``, ``n_jobs``, ``offline``."""
    values = parse_key_values(Path(path).read_text())
    policies = [p for p in values.pop("policies", "random").split(",") if p.strip()]
    sizes = [int(v) for v in values.pop("buffer_sizes", "64").split(",")]
    seeds = [int(v) for v in values.pop("seeds", "0").split(",")]
    n_jobs = int(values.pop("n_jobs", "1"))
    offline = values.pop("offline", "false").lower() in ("1", "true", "yes")
    base = config_from_mapping(values)
    cells = [
        GridCell(*parse_policy_spec(p), m, s) for p, m, s in itertools.product(policies, sizes, seeds)
    ]
    return ExperimentGrid(base, cells, n_jobs, offline)


def _cell_config(base: RunConfig, cell: GridCell) -> RunConfig:
    changes = {"policy": cell.policy, "buffer_size": cell.buffer_size, "seed": cell.seed}
    if base.data_seed is None:
        changes["data_seed"] = base.seed
    cfg = base.replace(**changes)
    return config_from_mapping(dict(cell.params), cfg)


def _run_cell(base: RunConfig, cell: GridCell, tasks: list, out_dir: Path | None, digest: str) -> tuple:
    cfg = _cell_config(base, cell)
    try:
        if scenario_digest(tasks) != digest:
            raise InvariantError("grid cell received different datasets")
        art = run_continual(cfg, tasks, None if out_dir is None else out_dir / cell.name)
        return cell, art.records, None
    except ReplaySegError as exc:
        log.warning("cell %s failed: %s", cell.name, exc)
        return cell, [], str(exc)


SUMMARY_FIELDS = ["policy", "params", "M", "seed", "step", "miou_all", "miou_exclusive", "status"]


def run_grid(grid: ExperimentGrid, out_dir=None, tasks: list | None = None) -> list:
    """Run every cell on one shared scenario and return the summary rows.

    Random-policy cells with several seeds add ``mean``, ``best`` and
    ``worst`` rows per buffer size (best/worst by final all-class mIoU).
    """
    base = grid.base if grid.base.data_seed is not None else grid.base.replace(data_seed=grid.base.seed)
    tasks = tasks if tasks is not None else make_scenario(base)
    digest = scenario_digest(tasks)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if grid.n_jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=grid.n_jobs)(delayed(_run_cell)(base, c, tasks, out, digest) for c in grid.cells)
    else:
        results = [_run_cell(base, c, tasks, out, digest) for c in grid.cells]
    subsets = sorted({k for _, recs, _ in results for r in recs for k in r["miou_subsets"]})
    rows = []
    for cell, recs, err in results:
        if err is not None:
            rows.append({"policy": cell.policy, "params": cell.params_text(), "M": cell.buffer_size, "seed": cell.seed,
                         "step": "", "status": f"error: {err}"})
            continue
        for r in recs:
            row = {
                "policy": cell.policy,
                "params": cell.params_text(),
                "M": cell.buffer_size,
                "seed": cell.seed,
                "step": r["step"],
                "miou_all": r["miou_all"],
                "miou_exclusive": r.get("miou_exclusive"),
                "status": "ok",
            }
            row.update({f"miou_{k}": r["miou_subsets"].get(k) for k in subsets})
            rows.append(row)
    rows += _random_summary(rows, subsets)
    if grid.offline:
        art = run_offline(base, tasks, None if out is None else out / "offline")
        r = art.final
        row = {"policy": "offline", "params": "", "M": 0, "seed": base.seed, "step": r["step"],
               "miou_all": r["miou_all"], "miou_exclusive": r.get("miou_exclusive"), "status": "ok"}
        row.update({f"miou_{k}": r["miou_subsets"].get(k) for k in subsets})
        rows.append(row)
    if out is not None:
        fields = SUMMARY_FIELDS + [f"miou_{k}" for k in subsets]
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", restval="")
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if v is None else v) for k, v in row.items()})
        (out / "grid.json").write_text(
            json.dumps({"dataset_digest": digest, "cells": [c.name for c in grid.cells]}, indent=2) + "\n"
        )
    return rows


def _random_summary(rows: list, subsets: list) -> list:
    out = []
    ok = [r for r in rows if r["policy"] == "random" and r["status"] == "ok"]
    for m in sorted({r["M"] for r in ok}):
        group = [r for r in ok if r["M"] == m]
        seeds = sorted({r["seed"] for r in group})
        if len(seeds) < 2:
            continue
        steps = sorted({r["step"] for r in group})
        last = steps[-1]
        final = {r["seed"]: r["miou_all"] for r in group if r["step"] == last and r["miou_all"] is not None}
        best = max(final, key=lambda s: (final[s], -s))
        worst = min(final, key=lambda s: (final[s], s))
        cols = ["miou_all", "miou_exclusive"] + [f"miou_{k}" for k in subsets]
        for step in steps:
            at = [r for r in group if r["step"] == step]
            mean_row = {"policy": "random-mean", "params": "", "M": m, "seed": "", "step": step, "status": "ok"}
            for c in cols:
                vals = [r.get(c) for r in at if r.get(c) is not None]
                mean_row[c] = round(float(np.mean(vals)), 12) if vals else None
            out.append(mean_row)
            for label, s in (("random-best", best), ("random-worst", worst)):
                src = next(r for r in at if r["seed"] == s)
                out.append({**src, "policy": label})
    return out


# comparison ---------------------------------------------------------------------


def _load_run(run_dir) -> tuple:
    run_dir = Path(run_dir)
    metrics = json.loads((run_dir / "metrics.json").read_text())
    last = metrics["steps"][-1]["step"]
    cm = _read_confusion(run_dir / f"confusion_{last}.csv")
    return metrics, cm


def analyze(run_a, run_b, out_dir) -> dict:
    """Side-by-side confusion, recency-bias deltas and overlaid CKA curves (b minus a)."""
    ma, ca = _load_run(run_a)
    mb, cb = _load_run(run_b)
    if ma["dataset_digest"] != mb["dataset_digest"] or ma["scenario"] != mb["scenario"]:
        raise ConfigError("runs were trained on different scenarios")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "confusion_compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth", "pred", "a", "b", "delta"])
        for t in range(ca.shape[0]):
            for p in range(ca.shape[1]):
                w.writerow([t, p, int(ca[t, p]), int(cb[t, p]), int(cb[t, p] - ca[t, p])])
    bias_rows = []
    for sa, sb in zip(ma["steps"], mb["steps"]):
        ra, rb = sa.get("recency_bias", {}), sb.get("recency_bias", {})
        for key in sorted(set(ra) | set(rb)):
            va, vb = ra.get(key), rb.get(key)
            delta = None if va is None or vb is None else round(vb - va, 12)
            bias_rows.append({"step": sa["step"], "classes": key, "a": va, "b": vb, "delta": delta})
    with open(out / "recency_compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "classes", "a", "b", "delta"], lineterminator="\n")
        w.writeheader()
        for row in bias_rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    curves = []
    with open(out / "cka_overlay.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "step", "layer", "value"])
        for label, m in (("a", ma), ("b", mb)):
            for step, curve in sorted(m["cka"].items(), key=lambda kv: int(kv[0])):
                curves.append((label, step))
                for layer, v in curve.items():
                    w.writerow([label, step, layer, repr(v)])
    miou_delta = {}
    for sa, sb in zip(ma["steps"], mb["steps"]):
        if sa["miou_all"] is not None and sb["miou_all"] is not None:
            miou_delta[str(sa["step"])] = round(sb["miou_all"] - sa["miou_all"], 12)
    report = {
        "run_a": str(run_a),
        "run_b": str(run_b),
        "confusion_delta_abs_sum": int(np.abs(cb - ca).sum()),
        "miou_all_delta": miou_delta,
        "recency_bias": bias_rows,
        "cka_curves": len(curves),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
