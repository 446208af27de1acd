import csv
import json

import numpy as np
import pytest

from replayseg.config import RunConfig
from replayseg.harness import (
    ExperimentGrid,
    GridCell,
    analyze,
    evaluate,
    load_grid,
    make_scenario,
    parse_policy_spec,
    run_continual,
    run_grid,
    run_offline,
)
from replayseg.types import ConfigError, TrainingDivergedError

TINY = RunConfig(
    height=12, width=12, train_per_task=16, val_per_task=6, epochs=4,
    hidden1=16, hidden2=8, patch_size=3, buffer_size=9, learning_rate=3e-3, cka_pixels=300,
)


@pytest.fixture(scope="module")
def tasks():
    return make_scenario(TINY)


class TestContinualRun:
    def test_single_task(self, tasks, tmp_path):
        art = run_continual(TINY, tasks[:1], tmp_path / "r")
        assert len(art.records) == 1 and art.cka == {}
        assert (tmp_path / "r" / "buffer_manifest_1.json").exists()
        assert len(art.buffer) == 9

    def test_record_fields(self, tasks):
        art = run_continual(TINY, tasks)
        assert [r["step"] for r in art.records] == [1, 2, 3]
        for r in art.records:
            assert 0.0 <= r["miou_all"] <= 1.0
        final = art.final
        assert set(final["miou_subsets"]) == {"S1", "S2", "S3"}
        assert "miou_exclusive" in final and "recency_bias" in final
        assert set(art.cka) == {2, 3} and set(art.cka[2]) == {"input", "h1", "h2", "logits"}

    def test_buffer_invariants(self, tasks):
        sizes = []
        art = run_continual(TINY, tasks, on_buffer_change=lambda b: sizes.append(len(b)))
        assert sizes and max(sizes) <= TINY.buffer_size
        for k, m in enumerate(art.manifests):
            assert len(m["entries"]) <= TINY.buffer_size
            assert all(e["inserted_at"] <= k for e in m["entries"])
            assert all(e["task_id"] == e["inserted_at"] for e in m["entries"])
        assert art.buffer.counts() == {0: 3, 1: 3, 2: 3}

    def test_reproducible_bytes(self, tasks, tmp_path):
        run_continual(TINY, tasks, tmp_path / "a")
        run_continual(TINY, tasks, tmp_path / "b")
        for name in ("metrics.json", "buffer_manifest.json", "cka.csv", "confusion_3.csv", "model_3.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_no_replay_keeps_buffer_empty(self, tasks):
        art = run_continual(TINY.replace(policy="none", buffer_size=0), tasks)
        assert len(art.buffer) == 0 and all(r["buffer"] == {} for r in art.records)

    def test_buffer_smaller_than_tasks(self, tasks):
        with pytest.raises(ConfigError):
            run_continual(TINY.replace(buffer_size=2), tasks)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_writes_partial_metrics(self, tasks, tmp_path):
        with pytest.raises(TrainingDivergedError):
            run_continual(TINY.replace(init_scale=1e30), tasks, tmp_path / "d")
        metrics = json.loads((tmp_path / "d" / "metrics.json").read_text())
        assert metrics["status"].startswith("diverged")

    def test_domain_scenario(self):
        cfg = TINY.replace(scenario="domain", replay_mix="ratio", buffer_size=4)
        tasks = make_scenario(cfg)
        art = run_continual(cfg, tasks)
        assert set(art.final["miou_val_sets"]) == {"T1", "T2"}
        assert "recency_bias" not in art.final


class TestEvaluate:
    def test_perfect_model_oracle(self, tasks, monkeypatch):
        from replayseg import harness

        truth = {id(s.image): s.true_labels for t in tasks for s in t.val_samples}
        monkeypatch.setattr(harness, "predict_labels", lambda model, image: truth[id(image)])
        seen = set().union(*(t.labeled_classes for t in tasks))
        record, _ = evaluate(None, tasks, 2, seen, TINY.num_classes)
        assert record["miou_all"] == pytest.approx(1.0)
        assert record["recency_bias"]["old"] == 0.0


class TestOffline:
    def test_single_task_matches_continual(self, tasks):
        cont = run_continual(TINY.replace(policy="none", buffer_size=0), tasks[:1])
        off = run_offline(TINY, tasks[:1])
        assert off.final["miou_all"] == cont.final["miou_all"]
        assert np.array_equal(off.models[-1].flat(), cont.models[-1].flat())

    def test_offline_beats_finetuning(self):
        cfg = TINY.replace(height=16, width=16, train_per_task=40, epochs=8, policy="none", buffer_size=0, distill="off")
        tasks = make_scenario(cfg)
        ft = run_continual(cfg, tasks).final["miou_all"]
        off = run_offline(cfg, tasks).final["miou_all"]
        assert off >= ft


class TestGrid:
    def test_parse_policy_spec(self):
        assert parse_policy_spec("div_class_bal:th=0.4;cmp=3") == ("div_class_bal", (("th", "0.4"), ("cmp", "3")))
        assert parse_policy_spec("random") == ("random", ())

    def test_load_grid(self, tmp_path):
        (tmp_path / "g.txt").write_text("epochs = 2\npolicies = random,loss_max\nbuffer_sizes = 8,16\nseeds = 0,1\n")
        grid = load_grid(tmp_path / "g.txt")
        assert len(grid.cells) == 8 and grid.base.epochs == 2

    def test_single_cell(self, tasks, tmp_path):
        grid = ExperimentGrid(TINY, [GridCell("loss_max", (), 9, 0)])
        rows = run_grid(grid, tmp_path / "g", tasks)
        assert [r["step"] for r in rows] == [1, 2, 3]
        with open(tmp_path / "g" / "summary.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 3

    def test_random_summary_rows(self, tasks):
        cells = [GridCell("random", (), 9, s) for s in (0, 1, 2)]
        rows = run_grid(ExperimentGrid(TINY, cells), None, tasks)
        final = [r for r in rows if r["policy"] == "random" and r["step"] == 3]
        mean = next(r for r in rows if r["policy"] == "random-mean" and r["step"] == 3)
        best = next(r for r in rows if r["policy"] == "random-best" and r["step"] == 3)
        worst = next(r for r in rows if r["policy"] == "random-worst" and r["step"] == 3)
        vals = [r["miou_all"] for r in final]
        assert mean["miou_all"] == pytest.approx(np.mean(vals))
        assert best["miou_all"] == max(vals) and worst["miou_all"] == min(vals)

    def test_failed_cell_reported(self, tasks):
        rows = run_grid(ExperimentGrid(TINY, [GridCell("random", (), 2, 0)]), None, tasks)
        assert rows[0]["status"].startswith("error")

    def test_offline_row(self, tasks):
        rows = run_grid(ExperimentGrid(TINY.replace(epochs=1), [GridCell("random", (), 9, 0)], offline=True), None, tasks)
        assert rows[-1]["policy"] == "offline"


class TestAnalyze:
    def test_self_comparison_is_zero(self, tasks, tmp_path):
        run_continual(TINY, tasks, tmp_path / "a")
        report = analyze(tmp_path / "a", tmp_path / "a", tmp_path / "cmp")
        assert report["confusion_delta_abs_sum"] == 0
        assert all(v == 0 for v in report["miou_all_delta"].values())
        assert all(r["delta"] in (0, None) for r in report["recency_bias"])
        for name in ("confusion_compare.csv", "recency_compare.csv", "cka_overlay.csv", "report.json"):
            assert (tmp_path / "cmp" / name).exists()

    def test_policy_difference(self, tasks, tmp_path):
        run_continual(TINY, tasks, tmp_path / "a")
        run_continual(TINY.replace(policy="none", buffer_size=0), tasks, tmp_path / "b")
        report = analyze(tmp_path / "a", tmp_path / "b", tmp_path / "cmp")
        assert report["confusion_delta_abs_sum"] > 0

    def test_scenario_mismatch(self, tasks, tmp_path):
        run_continual(TINY, tasks, tmp_path / "a")
        other = TINY.replace(seed=5)
        run_continual(other, make_scenario(other), tmp_path / "b")
        with pytest.raises(ConfigError):
            analyze(tmp_path / "a", tmp_path / "b", tmp_path / "cmp")
