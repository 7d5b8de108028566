"""End-to-end tests of the command-line surface and its exit codes."""
import json

import numpy as np
import pandas as pd
import pytest

from app import EXIT_DOMAIN_ERROR, EXIT_OK, EXIT_USAGE_ERROR, main
from services.localvol import ImpliedVolSurface, flat_surface, write_surface_csv
from tests.helpers import write_chain_file

ENVIRONMENT = {"spot": 100.0, "rate": 0.0, "dividend_yield": 0.0, "valuation_date": "2025-01-02"}


def _write_json(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


@pytest.fixture
def surface_file(tmp_path):
    return str(write_surface_csv(tmp_path / "local.csv", flat_surface(0.2, 1.0, 100.0)))


@pytest.fixture
def env_file(tmp_path):
    return _write_json(tmp_path / "env.json", ENVIRONMENT)


@pytest.fixture
def sim_config(tmp_path):
    payload = {
        "simulation": {"horizon": 0.5, "steps": 10, "paths": 32, "seed": 3, "record_paths": True},
        "environment": ENVIRONMENT,
        "model": {"spec": {"variant": "tanh"}, "partition": {"M": 11}},
    }
    return _write_json(tmp_path / "sim.json", payload)


@pytest.fixture
def calibration_config(tmp_path):
    payload = {
        "model": {"spec": {"variant": "ema_log", "beta": 0.001}, "partition": {"M": 11}},
        "steps_per_year": 12,
        "batch_schedule": [[0, 16]],
        "max_epochs": 2,
        "final_pairs": 16,
    }
    return _write_json(tmp_path / "calibration.json", payload)


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text(encoding="utf-8"))


class TestUsage:
    def test_help(self) -> None:
        assert main(["--help"]) == EXIT_OK

    def test_missing_required_flag(self) -> None:
        assert main(["simulate", "--surface", "x.csv"]) == EXIT_USAGE_ERROR

    def test_parse_error_records_failed_manifest(self, tmp_path) -> None:
        out = tmp_path / "run"
        assert main(["simulate", "--surface", "x.csv", "--out", str(out)]) == EXIT_USAGE_ERROR
        manifest = _manifest(out)
        assert manifest["status"] == "failed"
        assert manifest["command"] == "simulate"
        assert manifest["exit_code"] == EXIT_USAGE_ERROR
        assert manifest["error"].startswith("UsageError")
        assert "--config" in manifest["error"]

    def test_unknown_command(self) -> None:
        assert main(["optimise"]) == EXIT_USAGE_ERROR

    def test_bad_slice(self, tmp_path) -> None:
        argv = ["report", "--chain", "c", "--env", "e", "--surface", "s", "--out-dir", str(tmp_path), "--slice", "0.1"]
        assert main(argv) == EXIT_USAGE_ERROR
        assert _manifest(tmp_path)["error"].startswith("UsageError")

    def test_workers_must_be_positive(self, sim_config, surface_file, tmp_path) -> None:
        argv = ["--workers", "0", "simulate", "--config", sim_config, "--surface", surface_file, "--out", str(tmp_path / "o")]
        assert main(argv) == EXIT_USAGE_ERROR
        assert _manifest(tmp_path / "o")["exit_code"] == EXIT_USAGE_ERROR

    def test_missing_surface_writes_failed_manifest(self, sim_config, tmp_path) -> None:
        out = tmp_path / "run"
        code = main(["simulate", "--config", sim_config, "--surface", str(tmp_path / "absent.csv"), "--out", str(out)])
        assert code == EXIT_USAGE_ERROR
        manifest = _manifest(out)
        assert manifest["status"] == "failed"
        assert manifest["exit_code"] == EXIT_USAGE_ERROR
        assert manifest["error"].startswith("FileNotFoundError")

    def test_schema_violation(self, surface_file, tmp_path) -> None:
        bad = _write_json(tmp_path / "bad.json", {"simulation": {"horizon": 1.0, "steps": 4, "paths": 7}, "environment": ENVIRONMENT})
        code = main(["simulate", "--config", bad, "--surface", surface_file, "--out", str(tmp_path / "run")])
        assert code == EXIT_USAGE_ERROR


class TestSimulate:
    def test_run(self, sim_config, surface_file, tmp_path) -> None:
        out = tmp_path / "run"
        code = main(["--workers", "1", "simulate", "--config", sim_config, "--surface", surface_file, "--out", str(out)])
        assert code == EXIT_OK
        assert len(pd.read_csv(out / "terminal.csv")) == 32
        assert (out / "paths.csv").is_file()
        manifest = _manifest(out)
        assert manifest["status"] == "ok"
        assert manifest["seed"] == 3
        assert set(manifest["inputs"]) == {"config", "surface"}

    def test_deterministic(self, sim_config, surface_file, tmp_path) -> None:
        for name in ("a", "b"):
            main(["--workers", "1", "simulate", "--config", sim_config, "--surface", surface_file, "--out", str(tmp_path / name)])
        first = pd.read_csv(tmp_path / "a" / "terminal.csv")
        second = pd.read_csv(tmp_path / "b" / "terminal.csv")
        pd.testing.assert_frame_equal(first, second)


class TestPrice:
    def test_run(self, sim_config, surface_file, chain_file, tmp_path) -> None:
        out = tmp_path / "prices" / "prices.csv"
        argv = ["--workers", "1", "price", "--config", sim_config, "--surface", surface_file,
                "--instruments", str(chain_file), "--out", str(out)]
        assert main(argv) == EXIT_OK
        assert len(pd.read_csv(out)) == 5
        assert _manifest(out.parent)["command"] == "price"


class TestLocalvol:
    def test_run(self, env_file, tmp_path) -> None:
        implied = ImpliedVolSurface(
            time_grid=np.array([0.25, 0.5, 1.0]), strike_grid=np.array([80.0, 100.0, 120.0]), values=np.full((3, 3), 0.2)
        )
        implied_file = write_surface_csv(tmp_path / "implied.csv", implied)
        out = tmp_path / "lv" / "local.csv"
        assert main(["localvol", "--implied", str(implied_file), "--env", env_file, "--out", str(out)]) == EXIT_OK
        assert out.is_file()

    def test_grid_too_small_is_domain_error(self, env_file, tmp_path) -> None:
        implied = ImpliedVolSurface(
            time_grid=np.array([0.5, 1.0]), strike_grid=np.array([90.0, 110.0]), values=np.full((2, 2), 0.2)
        )
        implied_file = write_surface_csv(tmp_path / "implied.csv", implied)
        out = tmp_path / "lv" / "local.csv"
        assert main(["localvol", "--implied", str(implied_file), "--env", env_file, "--out", str(out)]) == EXIT_DOMAIN_ERROR
        manifest = _manifest(out.parent)
        assert manifest["status"] == "failed"
        assert manifest["error"].startswith("SurfaceError")


class TestCalibrateAndReport:
    def test_run(self, calibration_config, env_file, surface_file, chain_file, tmp_path) -> None:
        cal_dir = tmp_path / "cal"
        common = ["--chain", str(chain_file), "--env", env_file, "--surface", surface_file, "--config", calibration_config]
        assert main(["--workers", "1", "calibrate", *common, "--out-dir", str(cal_dir)]) == EXIT_OK
        assert (cal_dir / "theta.json").is_file()
        assert _manifest(cal_dir)["status"] == "ok"

        report_dir = tmp_path / "report"
        argv = ["--workers", "1", "report", *common, "--out-dir", str(report_dir),
                "--theta", str(cal_dir / "theta.json"), "--history", str(cal_dir / "loss_history.csv"),
                "--slice", "0.25,100"]
        assert main(argv) == EXIT_OK
        assert len(pd.read_csv(report_dir / "instruments.csv")) == 5
        assert (report_dir / "sensitivity_slice_t0.25_x100.csv").is_file()
        assert (report_dir / "loss_curve.csv").is_file()

    def test_calls_only_chain_is_domain_error(self, calibration_config, env_file, surface_file, tmp_path) -> None:
        chain = write_chain_file(tmp_path / "calls.csv", [(0.25, 100, "C", "E", 3.9, 4.1)])
        argv = ["calibrate", "--chain", str(chain), "--env", env_file, "--surface", surface_file,
                "--config", calibration_config, "--out-dir", str(tmp_path / "cal")]
        assert main(argv) == EXIT_DOMAIN_ERROR
        assert _manifest(tmp_path / "cal")["error"].startswith("CalibrationError")

    def test_missing_theta_checkpoint(self, env_file, surface_file, chain_file, tmp_path) -> None:
        argv = ["report", "--chain", str(chain_file), "--env", env_file, "--surface", surface_file,
                "--out-dir", str(tmp_path / "r"), "--theta", str(tmp_path / "absent.csv")]
        assert main(argv) == EXIT_USAGE_ERROR
