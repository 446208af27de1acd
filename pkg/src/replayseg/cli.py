"""Command line interface.

Exit codes: 0 success, 2 bad input or configuration, 3 a run invariant
failed (buffer capacity, provenance, causality), 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .buffer import CapacityError
from .config import POLICY_IDS, RunConfig, load_config
from .datasets import dataset_digest, read_dataset, write_dataset
from .harness import InvariantError, analyze, load_grid, make_scenario, run_continual, run_grid, run_offline
from .model import load_checkpoint
from .scoring import SCORE_KINDS, score_dataset, write_scores_csv
from .synthdata import default_scenario_spec, scenario_to_dict
from .types import ReplaySegError, TrainingDivergedError

log = logging.getLogger("replayseg")


def _base_config(path) -> tuple:
    if path is None:
        return RunConfig(), None
    text = Path(path).read_text()
    return load_config(path), text


def cmd_gen_data(args) -> int:
    cfg, _ = _base_config(args.config)
    cfg = cfg.replace(scenario=args.scenario, seed=args.seed, data_seed=args.seed)
    spec = default_scenario_spec(
        cfg.scenario_kind,
        num_classes=cfg.num_classes,
        height=cfg.height,
        width=cfg.width,
        train_per_task=cfg.train_per_task,
        val_per_task=cfg.val_per_task,
    )
    tasks = make_scenario(cfg)
    out = write_dataset(tasks, args.out, cfg.num_classes, extra={"seed": args.seed})
    meta = {
        "seed": args.seed,
        "spec": scenario_to_dict(spec),
        "splits": [
            {
                "task_id": t.task_id,
                "labeled_classes": sorted(t.labeled_classes),
                "exclusive_classes": sorted(t.exclusive_classes),
                "train_ids": [s.id for s in t.train_samples],
                "val_ids": [s.id for s in t.val_samples],
            }
            for t in tasks
        ],
        "digest": dataset_digest(out),
    }
    (out / "scenario.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {sum(len(t.train_samples) + len(t.val_samples) for t in tasks)} samples to {out}")
    return 0


def cmd_run(args) -> int:
    cfg, text = _base_config(args.config)
    changes = {"seed": args.seed}
    for flag, key in (
        ("policy", "policy"),
        ("buffer_size", "buffer_size"),
        ("th", "th"),
        ("cmp", "cmp"),
        ("rss_dim", "rss_dim"),
        ("direction", "direction"),
        ("distill", "distill"),
        ("epochs", "epochs"),
        ("data_seed", "data_seed"),
    ):
        value = getattr(args, flag)
        if value is not None:
            changes[key] = value
    cfg = cfg.replace(**changes)
    if args.data:
        tasks, index = read_dataset(args.data)
        if index["num_classes"] != cfg.num_classes:
            raise ReplaySegError(f"dataset has {index['num_classes']} classes, config says {cfg.num_classes}")
    else:
        tasks = make_scenario(cfg)
    if args.offline:
        art = run_offline(cfg, tasks, args.out, text)
    else:
        art = run_continual(cfg, tasks, args.out, text)
    final = art.final
    print(f"final mIoU {final['miou_all']}  (step {final['step']}, {art.run_dir})")
    return 0


def cmd_run_grid(args) -> int:
    grid = load_grid(args.grid)
    if args.n_jobs is not None:
        grid.n_jobs = args.n_jobs
    rows = run_grid(grid, args.out)
    failed = [r for r in rows if str(r.get("status", "ok")).startswith("error")]
    print(f"{len(grid.cells)} cells, {len(rows)} summary rows, {len(failed)} failed -> {Path(args.out) / 'summary.csv'}")
    return 3 if failed else 0


def cmd_analyze(args) -> int:
    report = analyze(args.a, args.b, args.out)
    print(f"confusion |delta| sum {report['confusion_delta_abs_sum']}; mIoU delta {report['miou_all_delta']}")
    return 0


def cmd_score(args) -> int:
    model, _ = load_checkpoint(args.model)
    tasks, _ = read_dataset(args.data)
    samples = [s for t in tasks for s in (t.train_samples if args.split == "train" else t.val_samples)]
    required = set(SCORE_KINDS) - {"gradient"}
    scores = score_dataset(model, samples, required)
    write_scores_csv(scores, args.out)
    print(f"scored {len(scores)} samples -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replayseg", description="Replay sample selection for continual segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario on disk")
    g.add_argument("--scenario", choices=["class", "domain"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="continual run (or --offline joint training)")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--data-seed", type=int)
    r.add_argument("--policy", choices=POLICY_IDS)
    r.add_argument("--buffer-size", type=int)
    r.add_argument("--th", type=float)
    r.add_argument("--cmp", type=int)
    r.add_argument("--rss-dim", type=int)
    r.add_argument("--direction", choices=["min", "max"])
    r.add_argument("--distill", choices=["auto", "on", "off"])
    r.add_argument("--epochs", type=int)
    r.add_argument("--data", help="dataset directory written by gen-data")
    r.add_argument("--offline", action="store_true")
    r.set_defaults(func=cmd_run)

    gr = sub.add_parser("run-grid", help="run a policy x memory x seed grid")
    gr.add_argument("--grid", required=True)
    gr.add_argument("--out", required=True)
    gr.add_argument("--n-jobs", type=int)
    gr.set_defaults(func=cmd_run_grid)

    a = sub.add_parser("analyze", help="compare two run directories")
    a.add_argument("--a", required=True)
    a.add_argument("--b", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("score", help="per-sample score table for a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "val"], default="train")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvariantError, CapacityError) as exc:
        print(f"invariant failed: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except (ReplaySegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
