"""End-to-end checks of the command line: run artifacts, audit, compare,
config handling. Uses a small double-integrator scenario so every run
finishes in seconds."""
import json
import subprocess
import sys

import numpy as np
import pytest

from qtorhc.cli import main, run_scenario
from qtorhc.config import (ConfigError, bundled_scenario_names, find_config,
                           load_config, save_config, validate_config_dict)
from qtorhc.report import read_trace

DI_SCENARIO = {
    "plant": "double_integrator",
    "mode": "qto",
    "x0": [0.8, 0.0],
    "delta": 0.1,
    "T_min": 0.5,
    "B_box": [0.3, 0.3],
    "W": [[10.0, 0.0], [0.0, 10.0]],
    "R": [[1.0]],
    "alpha": 0.05,
    "N": 12,
    "h": 0.01,
    "substeps": 2,
    "max_iter": 120,
    "warm_max_iter": 30,
    "tol_g": 1e-4,
    "restarts": 0,
    "max_steps": 60,
    "convergence_eps": 0.01,
    "settle_threshold": 0.05,
    "seed": 0,
}

RUN_FILES = ("trace.csv", "summary.json", "meta.json",
             "states.png", "control.png", "diagnostics.png")


def write_scenario(path, **overrides):
    raw = dict(DI_SCENARIO)
    raw.update(overrides)
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def di_config_path(tmp_path_factory):
    return write_scenario(tmp_path_factory.mktemp("cfg") / "di.json")


@pytest.fixture(scope="module")
def di_run(di_config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "qto"
    code = main(["run", "--config", str(di_config_path), "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def di_lq_run(di_config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "lq"
    code = main(["run", "--config", str(di_config_path), "--out", str(out),
                 "--mode", "lq"])
    assert code == 0
    return out


class TestRun:
    def test_writes_all_artifacts(self, di_run):
        for name in RUN_FILES:
            assert (di_run / name).exists(), name

    def test_summary_contents(self, di_run):
        summary = json.loads((di_run / "summary.json").read_text())
        assert summary["plant"] == "double_integrator"
        assert summary["mode"] == "qto"
        assert summary["converged"] is True
        assert summary["invariant_violations"] == 0
        assert summary["settling_time"] is not None
        assert summary["settling_time"] < summary["simulated_time"] + 1e-12
        assert 0.0 < summary["final_epsilon"] <= 1.0
        assert summary["control_effort"] > 0.0
        assert np.array(summary["K"]).shape == (1, 2)
        assert np.array(summary["H"]).shape == (2, 2)

    def test_trace_matches_summary(self, di_run):
        summary = json.loads((di_run / "summary.json").read_text())
        steps, dense = read_trace(di_run / "trace.csv")
        assert len(steps) == summary["steps"]
        assert len(dense["times"]) > len(steps)
        # value identity holds on every recorded step
        for row in steps:
            recon = (row["T_bar"] + row["epsilon"]
                     * (row["integral_L_head"] + row["integral_L_tail"])
                     + row["rho"] * row["terminal_q"])
            assert row["V"] == pytest.approx(recon, rel=1e-9)

    def test_meta_round_trips_config(self, di_run, di_config_path):
        meta = json.loads((di_run / "meta.json").read_text())
        reloaded = validate_config_dict(meta["config"])
        assert reloaded == load_config(di_config_path)
        assert meta["resolved"]["alpha"] == pytest.approx(0.05)

    def test_byte_identical_reruns(self, di_config_path, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["run", "--config", str(di_config_path),
                         "--out", str(out)]) == 0
        for name in ("trace.csv", "summary.json", "meta.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_seed_override_lands_in_meta(self, di_config_path, tmp_path):
        out = tmp_path / "seeded"
        assert main(["run", "--config", str(di_config_path), "--out",
                     str(out), "--seed", "7"]) == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["config"]["seed"] == 7

    def test_lq_mode_has_no_step_rows(self, di_lq_run):
        summary = json.loads((di_lq_run / "summary.json").read_text())
        assert summary["mode"] == "lq"
        assert summary["steps"] == 0
        assert summary["final_epsilon"] is None
        steps, dense = read_trace(di_lq_run / "trace.csv")
        assert steps == []
        assert len(dense["times"]) > 1

    def test_step_limit_exit_code(self, tmp_path):
        cfg = write_scenario(tmp_path / "short.json", max_steps=2)
        out = tmp_path / "short"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] is False
        assert summary["stop_reason"] == "step limit reached"

    def test_batch_runs_both(self, di_config_path, tmp_path):
        other = write_scenario(tmp_path / "di_lq.json", mode="lq")
        base = tmp_path / "batch"
        code = main(["run", "--config", str(di_config_path),
                     "--config", str(other), "--out", str(base)])
        assert code == 0
        for stem in ("di", "di_lq"):
            for name in RUN_FILES:
                assert (base / stem / name).exists(), (stem, name)

    def test_duplicate_batch_names_rejected(self, di_config_path, tmp_path,
                                            capsys):
        code = main(["run", "--config", str(di_config_path),
                     "--config", str(di_config_path), "--out", str(tmp_path)])
        assert code == 1
        assert "duplicate" in capsys.readouterr().err

    def test_output_dir_from_config(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = write_scenario(tmp_path / "di_out.json", mode="lq",
                             output_dir="from_config")
        assert main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "from_config" / "trace.csv").exists()


class TestSynth:
    def test_prints_gain_and_certificate(self, di_config_path, capsys):
        assert main(["synth", "--config", str(di_config_path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload) == {"K", "H", "alpha"}
        assert np.array(payload["K"]).shape == (1, 2)
        H = np.array(payload["H"])
        assert np.allclose(H, H.T)
        assert np.all(np.linalg.eigvalsh(H) > 0)
        assert payload["alpha"] == pytest.approx(0.05)

    def test_console_entry_point(self, di_config_path):
        proc = subprocess.run(
            [sys.executable, "-m", "qtorhc.cli", "synth", "--config",
             str(di_config_path)],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
        assert "alpha" in json.loads(proc.stdout)


class TestAudit:
    def test_clean_run_passes(self, di_run, capsys):
        assert main(["audit", str(di_run)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["ok"] is True
        assert report["steps_checked"] > 0
        assert report["level_check"] is True

    def test_tampered_value_detected(self, di_run, tmp_path, capsys):
        lines = (di_run / "trace.csv").read_text().splitlines()
        for i, line in enumerate(lines):
            if line.startswith("step"):
                cells = line.split(",")
                cells[5] = repr(float(cells[5]) * 2.0)  # V column
                lines[i] = ",".join(cells)
                break
        tampered = tmp_path / "tampered"
        tampered.mkdir()
        (tampered / "trace.csv").write_text("\n".join(lines) + "\n")
        assert main(["audit", str(tampered)]) == 2
        report = json.loads(capsys.readouterr().out)
        assert report["failures"]["identity"] == 1
        assert report["level_check"] is False  # no summary.json alongside

    def test_missing_run_is_hard_error(self, tmp_path, capsys):
        assert main(["audit", str(tmp_path / "nowhere")]) == 1
        assert "error" in capsys.readouterr().err


class TestCompare:
    def test_ranks_and_merges(self, di_run, di_lq_run, tmp_path, capsys):
        out = tmp_path / "cmp"
        code = main(["compare", str(di_run), str(di_lq_run), "--out",
                     str(out)])
        assert code == 0
        report = json.loads((out / "comparison.json").read_text())
        assert len(report["runs"]) == 2
        assert len(report["ranking"]) == 2
        assert (out / "comparison.csv").exists()
        assert (out / "comparison.png").exists()
        labels = {e["mode"] for e in report["runs"]}
        assert labels == {"qto", "lq"}
        best = report["ranking"][0]
        for entry in report["runs"]:
            if entry["label"] == best:
                assert entry["settling_time_vs_best"] == 0.0

    def test_mismatched_start_rejected(self, di_run, tmp_path, capsys):
        cfg = write_scenario(tmp_path / "other.json", x0=[0.4, 0.0],
                             mode="lq")
        other = tmp_path / "other_run"
        assert main(["run", "--config", str(cfg), "--out", str(other)]) == 0
        assert main(["compare", str(di_run), str(other), "--out",
                     str(tmp_path / "cmp")]) == 1
        assert "x0" in capsys.readouterr().err

    def test_single_run_rejected(self, di_run, tmp_path, capsys):
        assert main(["compare", str(di_run), "--out",
                     str(tmp_path / "cmp")]) == 1
        assert "two" in capsys.readouterr().err


class TestConfigHandling:
    def test_bundled_scenarios_load(self):
        names = bundled_scenario_names()
        assert {"pendulum_qto", "pendulum_time_optimal", "cartpole_qto",
                "cartpole_lq"} <= set(names)
        for name in names:
            config = load_config(find_config(name))
            assert config.delta <= config.T_min

    def test_bundled_pendulum_parameters(self):
        config = load_config(find_config("pendulum_qto"))
        assert config.plant == "pendulum"
        assert config.delta == pytest.approx(0.05)
        assert config.T_min == pytest.approx(0.5)
        assert config.alpha == pytest.approx(0.01)
        assert config.W[0][0] == pytest.approx(500.0)
        assert config.x0[0] == pytest.approx(-np.pi)

    def test_bundled_cartpole_parameters(self):
        config = load_config(find_config("cartpole_qto"))
        assert config.plant == "cartpole"
        assert config.delta == pytest.approx(0.2)
        assert config.T_min == pytest.approx(1.3)
        assert config.eps0 == pytest.approx(0.05)
        assert config.alpha == pytest.approx(0.07)
        assert config.W[0][0] == pytest.approx(1132.0)

    def test_round_trip(self, di_config_path, tmp_path):
        config = load_config(di_config_path)
        save_config(config, tmp_path / "copy.json")
        assert load_config(tmp_path / "copy.json") == config

    def test_validation_collects_all_errors(self):
        raw = dict(DI_SCENARIO, T_min=0.05, mode="sideways", bogus=1)
        with pytest.raises(ConfigError) as err:
            validate_config_dict(raw)
        text = str(err.value)
        assert "T_min" in text
        assert "mode" in text
        assert "bogus" in text

    def test_unknown_name_lists_bundled(self, tmp_path, capsys):
        assert main(["run", "--config", "no_such_scenario",
                     "--out", str(tmp_path)]) == 1
        assert "pendulum_qto" in capsys.readouterr().err

    def test_invalid_json_is_hard_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1
        assert "JSON" in capsys.readouterr().err


class TestRunScenarioApi:
    def test_returns_summary(self, di_config_path, tmp_path):
        config = load_config(di_config_path)
        code, summary = run_scenario(config, tmp_path / "api")
        assert code == 0
        assert summary["converged"] is True
        assert (tmp_path / "api" / "trace.csv").exists()
