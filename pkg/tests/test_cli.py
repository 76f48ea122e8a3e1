import csv
import json

import pytest

from conftest import small_doc
from hetfed import harness
from hetfed.cli import main
from hetfed.config import ExperimentConfig, resolve_dict
from hetfed.errors import ConfigError


def write_cfg(tmp_path, name="cfg.json", **overrides):
    doc = small_doc(**overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_rounds(run_dir):
    return (run_dir / harness.ROUNDS_FILE).read_bytes()


class TestRunCommand:
    def test_run_writes_expected_files(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "runs"
        assert main(["run", "--config", cfg, "--out", str(out)]) == 0
        run_dir = next(out.iterdir())
        for name in (harness.ROUNDS_FILE, harness.CONFIG_FILE,
                     harness.META_FILE, harness.TIMING_FILE, harness.DONE_FILE):
            assert (run_dir / name).exists()
        lines = [json.loads(l) for l in (run_dir / harness.ROUNDS_FILE).read_text().splitlines()]
        assert {l["round"] for l in lines} == {0, 1, 2}
        assert {l["client"] for l in lines} == {0, 1}

    def test_rerun_is_idempotent_and_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "runs")
        main(["run", "--config", cfg, "--out", out])
        run_dir = next((tmp_path / "runs").iterdir())
        first = read_rounds(run_dir)
        stamp = (run_dir / harness.ROUNDS_FILE).stat().st_mtime_ns
        main(["run", "--config", cfg, "--out", out])
        assert read_rounds(run_dir) == first
        assert (run_dir / harness.ROUNDS_FILE).stat().st_mtime_ns == stamp  # skipped

    def test_fresh_rerun_reproduces_bytes(self, tmp_path):
        cfg = write_cfg(tmp_path)
        main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["run", "--config", cfg, "--out", str(tmp_path / "b")])
        dir_a = next((tmp_path / "a").iterdir())
        dir_b = next((tmp_path / "b").iterdir())
        assert read_rounds(dir_a) == read_rounds(dir_b)
        assert (dir_a / harness.CONFIG_FILE).read_bytes() == (dir_b / harness.CONFIG_FILE).read_bytes()
        assert (dir_a / harness.META_FILE).read_bytes() == (dir_b / harness.META_FILE).read_bytes()

    def test_resolved_config_closure(self, tmp_path):
        """Feeding the echoed config back reproduces the identical run."""
        cfg = write_cfg(tmp_path, strategy="rhfl_plus_eccr")
        main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        dir_a = next((tmp_path / "a").iterdir())
        echoed = dir_a / harness.CONFIG_FILE
        main(["run", "--config", str(echoed), "--out", str(tmp_path / "b")])
        dir_b = next((tmp_path / "b").iterdir())
        assert dir_a.name == dir_b.name  # same content hash
        assert read_rounds(dir_a) == read_rounds(dir_b)

    def test_noise_rate_flag_overrides_file(self, tmp_path):
        cfg = write_cfg(tmp_path, data={"noise": {"rate": 0.1}})
        main(["run", "--config", cfg, "--out", str(tmp_path / "r"),
              "--noise-rate", "0.2"])
        run_dir = next((tmp_path / "r").iterdir())
        resolved = json.loads((run_dir / harness.CONFIG_FILE).read_text())
        assert resolved["data"]["noise"]["rate"] == 0.2

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"seed": 0}))  # missing strategy
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
        assert "strategy" in capsys.readouterr().err

    def test_jobs_flag_does_not_change_bytes(self, tmp_path):
        cfg = write_cfg(tmp_path, strategy="rhfl_plus_ccr",
                        data={"clients": 3, "shard_size": 30})
        main(["run", "--config", cfg, "--out", str(tmp_path / "j1"), "--jobs", "1"])
        main(["run", "--config", cfg, "--out", str(tmp_path / "j4"), "--jobs", "4"])
        a = next((tmp_path / "j1").iterdir())
        b = next((tmp_path / "j4").iterdir())
        assert read_rounds(a) == read_rounds(b)


class TestSweepCommand:
    def grid(self, tmp_path):
        path = tmp_path / "grid.json"
        path.write_text(json.dumps({
            "strategy": ["local_only", "rhfl_plus_ccr"],
            "noise_type": ["pairflip"],
            "mu": [0.1, 0.2],
            "seed": [0],
        }))
        return str(path)

    def test_sweep_executes_cartesian_product(self, tmp_path):
        cfg = write_cfg(tmp_path, rounds=1)
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", cfg, "--grid", self.grid(tmp_path),
                     "--out", str(out)]) == 0
        run_dirs = [p for p in out.iterdir() if p.is_dir()]
        assert len(run_dirs) == 4
        report = json.loads((out / "sweep_report.json").read_text())
        assert report["cells"] == 4 and not report["failed"]

    def test_finished_sweep_skips_recomputation(self, tmp_path):
        cfg = write_cfg(tmp_path, rounds=1)
        out = tmp_path / "sweep"
        main(["sweep", "--config", cfg, "--grid", self.grid(tmp_path), "--out", str(out)])
        stamps = {
            p.name: (p / harness.ROUNDS_FILE).stat().st_mtime_ns
            for p in out.iterdir() if p.is_dir()
        }
        main(["sweep", "--config", cfg, "--grid", self.grid(tmp_path), "--out", str(out)])
        for p in out.iterdir():
            if p.is_dir():
                assert (p / harness.ROUNDS_FILE).stat().st_mtime_ns == stamps[p.name]

    def test_failing_cell_recorded_and_exit_one(self, tmp_path):
        cfg = write_cfg(tmp_path, rounds=1)
        grid = tmp_path / "grid.json"
        # second cell requests more samples than the dataset holds
        grid.write_text(json.dumps({"data.shard_size": [40, 100000]}))
        code = main(["sweep", "--config", cfg, "--grid", str(grid),
                     "--out", str(tmp_path / "s")])
        assert code == 1
        report = json.loads((tmp_path / "s" / "sweep_report.json").read_text())
        assert len(report["failed"]) == 1
        assert len([p for p in (tmp_path / "s").iterdir() if p.is_dir()]) == 1

    def test_grid_flags_axis(self, tmp_path):
        cfg = write_cfg(tmp_path, rounds=1, strategy="rhfl_plus_eccr")
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"flags": harness.ablation_rows()[:2]}))
        out = tmp_path / "s"
        assert main(["sweep", "--config", cfg, "--grid", str(grid), "--out", str(out)]) == 0
        assert len([p for p in out.iterdir() if p.is_dir()]) == 2


class TestSummarizeCommand:
    def test_summary_layout_and_average(self, tmp_path):
        cfg = write_cfg(tmp_path, rounds=1, data={"clients": 4, "shard_size": 20})
        out = tmp_path / "runs"
        main(["run", "--config", cfg, "--out", str(out)])
        assert main(["summarize", "--runs", str(out), "--format", "csv"]) == 0
        with open(out / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        row = rows[0]
        for col in ("strategy", "hfl", "sl", "dlr", "reweight",
                    "noise_kind", "noise_rate", "metric", "avg"):
            assert col in row
        thetas = [float(row[f"theta_{i}"]) for i in range(1, 5)]
        assert float(row["avg"]) == pytest.approx(sum(thetas) / 4, abs=1e-12)
        assert row["metric"] == "final_round_accuracy"

    def test_both_variants(self, tmp_path):
        cfg = write_cfg(tmp_path, rounds=2)
        out = tmp_path / "runs"
        main(["run", "--config", cfg, "--out", str(out)])
        main(["summarize", "--runs", str(out), "--which", "both",
              "--out", str(tmp_path / "s.csv")])
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["metric"] for r in rows} == {
            "final_round_accuracy", "best_round_accuracy"
        }

    def test_missing_runs_error(self, tmp_path):
        with pytest.raises(ConfigError, match="missing logs"):
            harness.summarize([tmp_path / "nope"], tmp_path / "s.csv")

    def test_empty_run_set_is_config_error(self, tmp_path, capsys):
        assert main(["summarize", "--runs", str(tmp_path / "void")]) == 2


class TestFileSources:
    def test_idx_source_runs_end_to_end(self, tmp_path):
        from test_data import write_idx_pair
        import numpy as np

        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(300, 3, 3)).astype(np.uint8)
        labels = rng.integers(0, 3, size=300).astype(np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        cfg = write_cfg(
            tmp_path, rounds=1,
            data={"source": "idx", "idx_images": img, "idx_labels": lbl,
                  "clients": 2, "shard_size": 60, "n_public": 30, "test_size": 80},
            archs={"hidden_layers": [[6]]},
        )
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "runs")]) == 0

    def test_csv_source_runs_end_to_end(self, tmp_path):
        import numpy as np

        rng = np.random.default_rng(1)
        rows = ["label,f0,f1"]
        for _ in range(200):
            rows.append(f"{rng.integers(0, 2)},{rng.normal():.5f},{rng.normal():.5f}")
        csv_path = tmp_path / "toy.csv"
        csv_path.write_text("\n".join(rows) + "\n")
        cfg = write_cfg(
            tmp_path, rounds=1, strategy="local_only",
            data={"source": "csv", "csv_path": str(csv_path), "classes": 2,
                  "clients": 2, "shard_size": 50, "n_public": 0, "test_size": 60},
            archs={"hidden_layers": [[4]]},
        )
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "runs")]) == 0
        run_dir = next((tmp_path / "runs").iterdir())
        lines = [json.loads(l) for l in
                 (run_dir / harness.ROUNDS_FILE).read_text().splitlines()]
        # binary task: both AUC metrics are defined
        assert all(l["roc_auc"] is not None and l["pr_auc"] is not None for l in lines)


class TestGridExpansion:
    def test_single_cell(self):
        assert harness.expand_grid({"seed": [0]}) == [{"seed": 0}]

    def test_table_shaped_grid_has_twelve_cells(self):
        cells = harness.expand_grid({
            "flags": harness.ablation_rows(),
            "noise_type": ["pairflip", "symmetric"],
        })
        assert len(cells) == 12

    def test_axis_aliases_map_to_config_paths(self):
        cells = harness.expand_grid({"mu": [0.1], "noise_type": ["symmetric"]})
        assert cells == [{"data.noise.rate": 0.1, "data.noise.kind": "symmetric"}]

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigError):
            harness.expand_grid({"seed": []})


class TestRandomNoiseAssignment:
    def test_degenerate_range(self):
        rates = harness.random_noise_assignment(5, 0.2, 0.2, seed=0)
        assert all(r == 0.2 for r in rates)

    def test_same_seed_same_vector(self):
        a = harness.random_noise_assignment(10, 0.0, 0.5, seed=3)
        b = harness.random_noise_assignment(10, 0.0, 0.5, seed=3)
        assert a.tolist() == b.tolist()

    def test_draws_in_range_and_calibrated(self):
        import numpy as np

        means = []
        for seed in range(1000):
            draws = harness.random_noise_assignment(10, 0.0, 0.5, seed=seed)
            assert np.all((draws >= 0.0) & (draws <= 0.5))
            means.append(draws.mean())
        assert abs(np.mean(means) - 0.25) < 0.01

    def test_inverted_range_rejected(self):
        with pytest.raises(ConfigError):
            harness.random_noise_assignment(3, 0.5, 0.1, seed=0)

    def test_rates_recorded_in_run_meta(self, tmp_path):
        doc = small_doc(rounds=1,
                        data={"noise": {"kind": "symmetric", "rate": 0.0,
                                        "random_range": [0.0, 0.5]}})
        cfg = ExperimentConfig.from_dict(resolve_dict(doc))
        run_dir = harness.execute_run(cfg, tmp_path / "runs")
        meta = json.loads((run_dir / harness.META_FILE).read_text())
        assert len(meta["noise_rates"]) == 2
        assert all(0.0 <= r <= 0.5 for r in meta["noise_rates"])
        assert meta["noise_rates"] != [0.0, 0.0]
