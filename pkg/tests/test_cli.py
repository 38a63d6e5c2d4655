import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from dad4ts.cli import main

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def synthetic_csv(path, length=140, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    values = np.sin(2 * np.pi * t / 12) + 0.05 * rng.standard_normal(length) + 0.01 * t
    path.write_text("value\n" + "\n".join(repr(float(v)) for v in values) + "\n")
    return values


def write_config(tmp_path, out_name="run", **overrides):
    csv = tmp_path / "series.csv"
    if not csv.exists():
        synthetic_csv(csv)
    raw = {
        "dataset": {"name": "cli", "path": str(csv), "period": 12},
        "input_len": 12,
        "horizons": [3],
        "forecasters": ["linear"],
        "modes": ["baseline"],
        "epochs": 1,
        "train": {"max_epochs": 2, "patience": 2},
        "out_dir": str(tmp_path / out_name),
    }
    raw.update(overrides)
    cfg_path = tmp_path / f"{out_name}.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))
    return cfg_path


def stub_table(path, rows):
    cells = [
        {
            "dataset": d, "forecaster": f, "horizon": h, "mode": m,
            "rmse": r, "dtw": w,
        }
        for (d, f, h, m, r, w) in rows
    ]
    path.mkdir(parents=True, exist_ok=True)
    (path / "result_table.json").write_text(json.dumps({"cells": cells}))


class TestRun:
    def test_happy_path_and_idempotency(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg)]) == 0
        table = tmp_path / "run" / "result_table.json"
        assert table.exists()
        # refuses to overwrite without --force
        assert main(["run", "--config", str(cfg)]) == 1
        assert main(["run", "--config", str(cfg), "--force"]) == 0

    def test_malformed_config_no_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, out_name="bad", modes=["warp-speed"])
        assert main(["run", "--config", str(cfg)]) == 1
        assert not (tmp_path / "bad").exists()

    def test_missing_out_dir_rejected(self, tmp_path):
        cfg = write_config(tmp_path, out_name="noout")
        raw = yaml.safe_load(cfg.read_text())
        raw.pop("out_dir")
        cfg.write_text(yaml.safe_dump(raw))
        assert main(["run", "--config", str(cfg)]) == 1

    def test_mode_and_sampler_overrides(self, tmp_path):
        cfg = write_config(tmp_path, out_name="ovr", modes=["baseline", "gaussian"])
        assert main([
            "run", "--config", str(cfg), "--mode", "baseline",
            "--steps", "4", "--guidance-w", "0.5",
        ]) == 0
        snapshot = json.loads((tmp_path / "ovr" / "config.json").read_text())
        assert snapshot["modes"] == ["baseline"]
        assert snapshot["sampler"]["steps"] == 4
        assert snapshot["sampler"]["guidance_weight"] == 0.5

    def test_rerun_reproduces_table_bytes(self, tmp_path):
        cfg_a = write_config(tmp_path, out_name="rep_a")
        cfg_b = write_config(tmp_path, out_name="rep_b")
        assert main(["run", "--config", str(cfg_a)]) == 0
        assert main(["run", "--config", str(cfg_b)]) == 0
        a = (tmp_path / "rep_a" / "result_table.json").read_bytes()
        b = (tmp_path / "rep_b" / "result_table.json").read_bytes()
        assert a == b


class TestAggregate:
    def test_reference_row_average(self, tmp_path):
        baseline = [1.32, 1.38, 1.30, 0.153, 0.144, 0.192, 0.184, 0.201]
        gaussian = [1.30, 1.42, 1.41, 0.161, 0.148, 0.207, 0.182, 0.209]
        names = ["rnn", "lstm", "trans", "itrans", "patch", "times", "s2ip", "olin"]
        rows = [("employees", n, 12, "baseline", r, 1.0) for n, r in zip(names, baseline)]
        rows += [("employees", n, 12, "gaussian", r, 1.0) for n, r in zip(names, gaussian)]
        stub_table(tmp_path / "runA", rows)
        out = tmp_path / "combined.json"
        assert main(["aggregate", str(tmp_path / "runA"), "--out", str(out)]) == 0
        combined = json.loads(out.read_text())
        rmse_mean = combined["improvement"]["gaussian"]["rmse"]["imp_mean"]
        assert rmse_mean == pytest.approx(3.57, abs=0.05)

    def test_method_equals_baseline_zero_rate(self, tmp_path):
        rows = [
            ("d", "linear", 3, "baseline", 1.0, 2.0),
            ("d", "linear", 3, "dad4ts", 1.0, 2.0),
        ]
        stub_table(tmp_path / "runB", rows)
        out = tmp_path / "same.json"
        assert main(["aggregate", str(tmp_path / "runB"), "--out", str(out)]) == 0
        combined = json.loads(out.read_text())
        assert combined["improvement"]["dad4ts"]["imp_rate"] == 0.0

    def test_cell_order_invariance(self, tmp_path):
        rows = [
            ("d", "linear", 3, "baseline", 1.0, 2.0),
            ("d", "linear", 6, "baseline", 1.1, 2.1),
            ("d", "linear", 3, "dad4ts", 0.9, 1.9),
            ("d", "linear", 6, "dad4ts", 1.2, 2.2),
        ]
        stub_table(tmp_path / "a" / "run1", rows)
        stub_table(tmp_path / "b" / "run1", rows[::-1])
        out_c, out_d = tmp_path / "c.json", tmp_path / "d.json"
        assert main(["aggregate", str(tmp_path / "a" / "run1"), "--out", str(out_c)]) == 0
        assert main(["aggregate", str(tmp_path / "b" / "run1"), "--out", str(out_d)]) == 0
        assert out_c.read_bytes() == out_d.read_bytes()

    def test_missing_baseline_rejected(self, tmp_path):
        stub_table(tmp_path / "runE", [("d", "linear", 3, "dad4ts", 1.0, 2.0)])
        out = tmp_path / "e.json"
        assert main(["aggregate", str(tmp_path / "runE"), "--out", str(out)]) == 1

    def test_refuses_overwrite(self, tmp_path):
        rows = [
            ("d", "linear", 3, "baseline", 1.0, 2.0),
            ("d", "linear", 3, "dad4ts", 0.9, 1.9),
        ]
        stub_table(tmp_path / "runF", rows)
        out = tmp_path / "f.json"
        out.write_text("{}")
        assert main(["aggregate", str(tmp_path / "runF"), "--out", str(out)]) == 1
        assert main(["aggregate", str(tmp_path / "runF"), "--out", str(out), "--force"]) == 0


def fake_dump_dir(tmp_path, n_selected=3):
    rng = np.random.default_rng(0)
    run = tmp_path / "fakerun"
    cell = run / "cells" / "linear_h3_dad4ts"
    cell.mkdir(parents=True)
    n = 10
    mask = np.zeros(n)
    mask[:n_selected] = 1.0
    np.savez(
        cell / "samples.npz",
        real_windows=rng.standard_normal((n, 15)),
        generated_windows=rng.standard_normal((n, 15)),
        probs=rng.uniform(0.2, 0.9, n),
        mask=mask,
        generated_proj=rng.standard_normal((n, 2)),
        real_proj=rng.standard_normal((n, 2)),
    )
    (run / "result_table.json").write_text(json.dumps({"cells": []}))
    return run


class TestPlot:
    @pytest.mark.parametrize("kind", ["kde", "pca_scatter", "series_overlay"])
    def test_kinds_render(self, tmp_path, kind):
        run = fake_dump_dir(tmp_path)
        out = tmp_path / f"{kind}.png"
        assert main(["plot", "--run", str(run), "--kind", kind, "--out", str(out)]) == 0
        assert out.exists() and out.stat().st_size > 0

    def test_empty_selection_plots_with_note(self, tmp_path):
        run = fake_dump_dir(tmp_path, n_selected=0)
        out = tmp_path / "kde_empty.png"
        assert main(["plot", "--run", str(run), "--kind", "kde", "--out", str(out)]) == 0
        assert out.exists() and out.stat().st_size > 0

    def test_repeat_renders_identical_bytes(self, tmp_path):
        run = fake_dump_dir(tmp_path)
        out1 = tmp_path / "one.png"
        out2 = tmp_path / "two.png"
        assert main(["plot", "--run", str(run), "--kind", "kde", "--out", str(out1)]) == 0
        assert main(["plot", "--run", str(run), "--kind", "kde", "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_dumps_rejected(self, tmp_path):
        empty = tmp_path / "emptyrun"
        empty.mkdir()
        out = tmp_path / "none.png"
        assert main(["plot", "--run", str(empty), "--kind", "kde", "--out", str(out)]) == 1
        assert not out.exists()

    def test_refuses_overwrite(self, tmp_path):
        run = fake_dump_dir(tmp_path)
        out = tmp_path / "taken.png"
        out.write_bytes(b"occupied")
        assert main(["plot", "--run", str(run), "--kind", "kde", "--out", str(out)]) == 1
        assert out.read_bytes() == b"occupied"


class TestShippedConfigs:
    def test_all_parse(self):
        for cfg_path in sorted(CONFIG_DIR.glob("*.yaml")):
            raw = yaml.safe_load(cfg_path.read_text())
            assert "out_dir" in raw
            assert raw["dataset"]["name"]

    def test_ili_horizons(self):
        raw = yaml.safe_load((CONFIG_DIR / "ili.yaml").read_text())
        assert raw["horizons"] == [2, 4, 8, 12]
        assert raw["input_len"] == 12

    def test_default_seed_is_2025(self):
        from dad4ts.pipeline import ExperimentConfig

        cfg = ExperimentConfig.from_dict(
            {"dataset": {"name": "x", "values": list(np.sin(np.arange(100.0)))}, "horizons": [3]}
        )
        assert cfg.seed == 2025
