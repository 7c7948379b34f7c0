from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path
from typing import Any

import numpy as np
import pytest
from _pytest.capture import CaptureFixture
from _pytest.monkeypatch import MonkeyPatch

from autodiff.tensor import NonFiniteError
from pipeline.commands import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_FAILURE,
    EXIT_NUMERICAL,
    SIM_FILE,
    CommandResult,
    cmd_generate_data,
    cmd_report,
    cmd_train,
    cmd_transfer,
    exit_code_for,
)
from pipeline.config import THREADS_ENV, ConfigError, PipelineConfig, load_config, worker_count
from pipeline.manifest import LOCK_NAME, DataError, output_lock, prepare_output_dir, write_manifest
from run_pipeline import LOG_DIR_ENV, configure_logging, main, print_summary
from spectra.dataset import SpectralDataset, load_dataset, save_dataset
from training.trainer import FINAL_CHECKPOINT

TINY_CONFIG: dict[str, Any] = {
    "seed": 4,
    "benchmark": {
        "n_sim": 120,
        "n_real_train": 120,
        "n_real_test": 60,
        "n_wavelengths": 16,
        "knn_reference_size": 100,
    },
    "model": {
        "input_shape": [1, 16],
        "blocks_per_scale": [2],
        "condition_per_block": ["DY", "None"],
        "n_classes": 4,
        "hidden_layers": 1,
        "hidden_width": 8,
    },
    "train": {
        "epochs": 1,
        "batch_size": 32,
        "checkpoint_every": 1,
        "discriminator_spec": {"hidden_width": 8, "hidden_layers": 1},
    },
    "eval": {"n_trees": 5},
}


def write_config(directory: Path, payload: dict[str, Any] | None = None) -> Path:
    path = directory / "config.json"
    path.write_text(json.dumps(payload or TINY_CONFIG), encoding="utf-8")
    return path


class ConfigTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        self.root = Path(self.tmpdir.name)

    def test_defaults_without_a_file(self) -> None:
        cfg = load_config(None)
        self.assertEqual(cfg, PipelineConfig())
        self.assertEqual(cfg.model_spec().input_shape, (1, cfg.benchmark.n_wavelengths))

    def test_unknown_nested_key_is_named(self) -> None:
        path = write_config(self.root, {"train": {"generator": {"learning_rate": 0.1}}})
        with self.assertRaises(ConfigError) as ctx:
            load_config(path)
        self.assertIn("train.generator.learning_rate", str(ctx.exception))

    def test_wrong_type_and_invalid_value(self) -> None:
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"benchmark": {"n_sim": "many"}})
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"train": {"epochs": -2}})
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"model": {"input_shape": [1, 16], "depth": 3}})

    def test_invalid_json_and_missing_file(self) -> None:
        broken = self.root / "broken.json"
        broken.write_text("{\n  \"seed\": 1,\n}", encoding="utf-8")
        with self.assertRaises(ConfigError):
            load_config(broken)
        with self.assertRaises(ConfigError):
            load_config(self.root / "absent.json")

    def test_canonical_json_round_trip(self) -> None:
        cfg = load_config(write_config(self.root))
        again = PipelineConfig.from_dict(json.loads(cfg.to_json()))
        self.assertEqual(again, cfg)
        self.assertEqual(again.to_json(), cfg.to_json())

    def test_master_seed_reaches_every_stage(self) -> None:
        cfg = PipelineConfig.from_dict({"seed": 9})
        self.assertEqual((cfg.benchmark.seed, cfg.train.seed, cfg.eval.seed), (9, 9, 9))
        reseeded = cfg.with_seed(11)
        self.assertEqual((reseeded.seed, reseeded.benchmark.seed, reseeded.train.seed), (11, 11, 11))


def test_worker_count_reads_the_environment(monkeypatch: MonkeyPatch) -> None:
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(THREADS_ENV, "0")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv(THREADS_ENV)
    assert worker_count() >= 1


def test_exit_codes_follow_the_error_kind() -> None:
    assert exit_code_for(ConfigError("bad key")) == EXIT_CONFIG
    assert exit_code_for(DataError("grid")) == EXIT_DATA
    assert exit_code_for(FileNotFoundError("x")) == EXIT_DATA
    assert exit_code_for(NonFiniteError("nan")) == EXIT_NUMERICAL
    assert exit_code_for(RuntimeError("boom")) == EXIT_FAILURE


class ManifestTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        self.root = Path(self.tmpdir.name)

    def test_non_empty_directory_needs_force(self) -> None:
        out = self.root / "out"
        prepare_output_dir(out)
        (out / "old.csv").write_text("x\n", encoding="utf-8")
        with self.assertRaises(DataError):
            prepare_output_dir(out)
        prepare_output_dir(out, force=True)
        prepare_output_dir(out, allow_existing=True)

    def test_lock_is_exclusive_and_released(self) -> None:
        out = self.root / "locked"
        with output_lock(out) as lock_path:
            self.assertTrue(lock_path.exists())
            with self.assertRaises(DataError):
                with output_lock(out):
                    pass
        self.assertFalse((out / LOCK_NAME).exists())

    def test_manifest_bytes_are_reproducible(self) -> None:
        data = self.root / "data.csv"
        data.write_text("a,b\n1,2\n", encoding="utf-8")
        first = write_manifest(self.root, command="x", config_hash="h", seed=1, inputs={}, outputs=[data]).read_bytes()
        second = write_manifest(self.root, command="x", config_hash="h", seed=1, inputs={}, outputs=[data]).read_bytes()
        self.assertEqual(first, second)
        self.assertIn("data.csv", json.loads(first)["outputs"])


def test_configure_logging_creates_daily_log(tmp_path: Path, monkeypatch: MonkeyPatch) -> None:
    monkeypatch.delenv(LOG_DIR_ENV, raising=False)
    monkeypatch.setattr("run_pipeline.LOGS_DIR", tmp_path)
    log_path = configure_logging()

    assert log_path.exists()
    assert log_path.parent == tmp_path
    assert log_path.name.startswith("flowbridge_")
    assert log_path.suffix == ".log"


def test_print_summary_outputs_expected_lines(capsys: CaptureFixture[str]) -> None:
    results = [
        CommandResult(name="train", status="success", duration_seconds=1.234, outputs=[Path("a"), Path("b")]),
        CommandResult(name="eval", status="skipped", duration_seconds=0.0),
    ]

    print_summary(results)
    out = capsys.readouterr().out

    assert "FLOWBRIDGE SUMMARY" in out
    assert "command,status,outputs,duration_seconds" in out
    assert "train,success,2,1.234" in out
    assert "eval,skipped,0,0.000" in out


@pytest.fixture
def quiet_logs(tmp_path: Path, monkeypatch: MonkeyPatch) -> Path:
    monkeypatch.setenv(LOG_DIR_ENV, str(tmp_path / "logs"))
    monkeypatch.setenv(THREADS_ENV, "2")
    return tmp_path


def test_run_all_is_reproducible(quiet_logs: Path) -> None:
    config = write_config(quiet_logs)
    for name in ("first", "second"):
        assert main(["run-all", "--config", str(config), "--out", str(quiet_logs / name)]) == 0

    first, second = quiet_logs / "first", quiet_logs / "second"
    for relative in ("eval/metrics.csv", "eval/wavelength_diff.csv", "data/sim.csv", "data/manifest.json"):
        assert (first / relative).read_bytes() == (second / relative).read_bytes(), relative
    assert (first / "train" / FINAL_CHECKPOINT).read_bytes() == (second / "train" / FINAL_CHECKPOINT).read_bytes()
    report = (first / "report.html").read_text(encoding="utf-8")
    assert "transferred" in report and "<svg" in report
    summary = json.loads((first / "eval" / "eval_summary.json").read_text(encoding="utf-8"))
    assert 0.0 <= summary["fraction_wavelengths_improved"] <= 1.0


def test_generate_data_is_seed_deterministic(quiet_logs: Path) -> None:
    config = write_config(quiet_logs)
    cmd_generate_data(config, quiet_logs / "a", seed=12)
    cmd_generate_data(config, quiet_logs / "b", seed=12)
    cmd_generate_data(config, quiet_logs / "c", seed=13)
    a, b, c = ((quiet_logs / n / SIM_FILE).read_bytes() for n in "abc")
    assert a == b
    assert a != c
    assert load_config(quiet_logs / "a" / "config.json").benchmark.seed == 12


def test_occupied_output_and_missing_config_exit_codes(quiet_logs: Path) -> None:
    out = quiet_logs / "occupied"
    out.mkdir()
    (out / "keep.txt").write_text("mine\n", encoding="utf-8")
    assert main(["generate-data", "--config", str(write_config(quiet_logs)), "--out", str(out)]) == EXIT_DATA
    assert (out / "keep.txt").read_text(encoding="utf-8") == "mine\n"
    assert main(["generate-data", "--config", str(quiet_logs / "nope.json"), "--out", str(quiet_logs / "x")]) == EXIT_CONFIG


def test_untrained_checkpoint_transfers_to_the_input(quiet_logs: Path) -> None:
    config = write_config(quiet_logs)
    data_dir, train_dir = quiet_logs / "data", quiet_logs / "train"
    cmd_generate_data(config, data_dir)
    cmd_train(None, data_dir, train_dir, epochs=0)
    out = quiet_logs / "transfer" / "transferred.csv"
    cmd_transfer(train_dir / FINAL_CHECKPOINT, data_dir / SIM_FILE, out)

    sim = load_dataset(data_dir / SIM_FILE)
    transferred = load_dataset(out)
    assert transferred.domain == "transferred"
    np.testing.assert_array_equal(transferred.labels, sim.labels)
    assert np.max(np.abs(transferred.spectra - sim.spectra)) < 1e-12
    train_manifest = json.loads((train_dir / "manifest.json").read_text(encoding="utf-8"))
    transfer_manifest = json.loads((out.parent / "transferred.manifest.json").read_text(encoding="utf-8"))
    assert transfer_manifest["config_hash"] == train_manifest["config_hash"] != ""
    assert transfer_manifest["seed"] == train_manifest["seed"] == TINY_CONFIG["seed"]
    with pytest.raises(DataError):
        cmd_transfer(train_dir / FINAL_CHECKPOINT, data_dir / SIM_FILE, out)


def test_grid_mismatch_stops_training(quiet_logs: Path) -> None:
    data_dir = quiet_logs / "mismatch"
    rng = np.random.default_rng(0)
    save_dataset(
        SpectralDataset(rng.uniform(0.1, 0.9, (8, 16)), np.linspace(500.0, 1000.0, 16), "sim", labels=np.arange(8) % 4),
        data_dir / "sim.csv",
    )
    save_dataset(
        SpectralDataset(rng.uniform(0.1, 0.9, (8, 8)), np.linspace(500.0, 1000.0, 8), "pseudo-real"),
        data_dir / "real_train.csv",
    )
    with pytest.raises(DataError):
        cmd_train(write_config(quiet_logs), data_dir, quiet_logs / "train")
    assert not (quiet_logs / "train" / FINAL_CHECKPOINT).exists()


def test_resumed_train_command_matches_an_uninterrupted_run(quiet_logs: Path) -> None:
    data_dir = quiet_logs / "data"
    cmd_generate_data(write_config(quiet_logs), data_dir)
    full, partial = quiet_logs / "full", quiet_logs / "partial"
    assert main(["train", "--data", str(data_dir), "--out", str(full), "--epochs", "2"]) == 0
    assert main(["train", "--data", str(data_dir), "--out", str(partial), "--epochs", "1"]) == 0
    resumed = ["train", "--data", str(data_dir), "--out", str(partial), "--epochs", "2"]
    assert main([*resumed, "--resume", str(partial / "epoch_0001.cinn")]) == 0

    assert (partial / FINAL_CHECKPOINT).read_bytes() == (full / FINAL_CHECKPOINT).read_bytes()
    manifest = json.loads((partial / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["extra"]["resumed_from"] == "epoch_0001.cinn"


def test_report_needs_an_eval_directory(quiet_logs: Path) -> None:
    with pytest.raises(DataError):
        cmd_report(quiet_logs)


class CliSubprocessTests(unittest.TestCase):
    def setUp(self) -> None:
        self.repo_root = Path(__file__).resolve().parents[1]
        self.tmp_dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp_dir.cleanup)
        self.env = {**os.environ, LOG_DIR_ENV: self.tmp_dir.name}

    def _run(self, *args: str) -> subprocess.CompletedProcess[str]:
        return subprocess.run(
            [sys.executable, "run_pipeline.py", *args],
            cwd=self.repo_root,
            env=self.env,
            text=True,
            capture_output=True,
            check=False,
        )

    def test_help_lists_the_commands(self) -> None:
        result = self._run("--help")
        self.assertEqual(result.returncode, 0, result.stderr)
        for command in ("generate-data", "train", "transfer", "eval", "report", "run-all"):
            self.assertIn(command, result.stdout)

    def test_missing_config_exits_with_config_code(self) -> None:
        missing = Path(self.tmp_dir.name) / "missing.json"
        result = self._run("generate-data", "--config", str(missing), "--out", str(Path(self.tmp_dir.name) / "out"))
        self.assertEqual(result.returncode, EXIT_CONFIG, result.stderr)
        self.assertIn("generate-data,failed", result.stdout)


if __name__ == "__main__":
    unittest.main()
