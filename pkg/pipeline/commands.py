"""Pipeline steps behind the ``run_pipeline.py`` subcommands.

Every command writes into its own output directory under a lock file and
finishes with a manifest of input and output hashes.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Final

import numpy as np

from autodiff.rng import RngStream
from autodiff.tensor import NonFiniteError, ShapeError
from evaluation.plots import write_report_plots
from evaluation.report import EvalDatasets, run_downstream_eval, write_report_csvs
from evaluation.transfer import transfer_dataset
from export_report import build_report
from flows.checkpoint import Checkpoint, CheckpointError, canonical_json, load_checkpoint, restore_model
from flows.model import FlowModel, ModelSpec, build_model
from pipeline.config import ConfigError, PipelineConfig, config_hash, load_config, worker_count
from pipeline.manifest import DataError, hash_files, output_lock, prepare_output_dir, write_manifest
from spectra.benchmark import generate_benchmark
from spectra.dataset import (
    DatasetFormatError,
    SpectralDataset,
    load_dataset,
    load_labels,
    save_dataset,
    save_labels,
)
from training.trainer import FINAL_CHECKPOINT, TrainingSet, new_training_state, resume, train

SIM_FILE: Final[str] = "sim.csv"
REAL_TRAIN_FILE: Final[str] = "real_train.csv"
REAL_TRAIN_LABELS_FILE: Final[str] = "real_train_labels.csv"
REAL_TEST_FILE: Final[str] = "real_test.csv"
CONFIG_FILE: Final[str] = "config.json"
STATS_FILE: Final[str] = "train_stats.csv"
TRANSFERRED_FILE: Final[str] = "transferred.csv"
SUMMARY_FILE: Final[str] = "eval_summary.json"
RUNTIMES_FILE: Final[str] = "runtimes.json"

EXIT_OK: Final[int] = 0
EXIT_FAILURE: Final[int] = 1
EXIT_CONFIG: Final[int] = 2
EXIT_DATA: Final[int] = 3
EXIT_NUMERICAL: Final[int] = 4


@dataclass
class CommandResult:
    name: str
    status: str
    duration_seconds: float
    outputs: list[Path] = field(default_factory=list)
    error: Exception | None = None


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NonFiniteError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataError, DatasetFormatError, CheckpointError, ShapeError, FileNotFoundError, ValueError)):
        return EXIT_DATA
    return EXIT_FAILURE


def _resolve_config(config_path: Path | None, fallback_dir: Path | None = None) -> PipelineConfig:
    """Explicit config file, else the config stored next to the data, else defaults."""
    if config_path is None and fallback_dir is not None and (fallback_dir / CONFIG_FILE).exists():
        return load_config(fallback_dir / CONFIG_FILE)
    return load_config(config_path)


def _load(path: Path) -> SpectralDataset:
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    return load_dataset(path)


def _load_checkpoint(checkpoint: Path) -> Checkpoint:
    if not checkpoint.exists():
        raise DataError(f"checkpoint not found: {checkpoint}")
    return load_checkpoint(checkpoint)


def _load_model(checkpoint: Path) -> FlowModel:
    return restore_model(_load_checkpoint(checkpoint))


def _check_trainable(spec: ModelSpec, sim: SpectralDataset, real: SpectralDataset) -> None:
    if not sim.same_grid(real):
        raise DataError(
            f"wavelength grids differ: sim has {sim.n_wavelengths} points, real has {real.n_wavelengths}"
        )
    if spec.input_shape != (1, sim.n_wavelengths):
        raise DataError(f"model input {spec.input_shape} does not fit spectra with {sim.n_wavelengths} wavelengths")
    if sim.labels is None:
        raise DataError("simulated training data has no class labels")
    labels = sim.labels
    if labels.size and int(labels.max()) >= spec.n_classes:
        raise DataError(f"sim labels reach class {int(labels.max())}, model has {spec.n_classes} classes")


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------


def cmd_generate_data(
    config_path: Path | None, out: Path, *, seed: int | None = None, force: bool = False
) -> list[Path]:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    prepare_output_dir(out, force=force)
    with output_lock(out):
        bench = generate_benchmark(cfg.benchmark, workers=worker_count())
        outputs = [
            save_dataset(bench.sim, out / SIM_FILE),
            save_dataset(bench.real_train, out / REAL_TRAIN_FILE),
            save_labels(bench.real_train_labels, out / REAL_TRAIN_LABELS_FILE),
            save_dataset(bench.real_test, out / REAL_TEST_FILE),
        ]
        config_file = out / CONFIG_FILE
        config_file.write_text(cfg.to_json() + "\n", encoding="utf-8")
        outputs.append(config_file)
        write_manifest(
            out,
            command="generate-data",
            config_hash=config_hash(cfg),
            seed=cfg.seed,
            inputs={},
            outputs=outputs,
            extra={"benchmark": cfg.benchmark.to_dict()},
        )
    return outputs


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(
    config_path: Path | None,
    data_dir: Path,
    out: Path,
    *,
    epochs: int | None = None,
    resume_from: Path | None = None,
    force: bool = False,
) -> list[Path]:
    cfg = _resolve_config(config_path, data_dir)
    if epochs is not None:
        try:
            cfg = cfg.with_overrides(epochs=epochs)
        except ValueError as exc:
            raise ConfigError(f"--epochs: {exc}") from exc
    spec = cfg.model_spec()
    sim = _load(data_dir / SIM_FILE)
    real = _load(data_dir / REAL_TRAIN_FILE)
    # grid and width checks run before any training work
    _check_trainable(spec, sim, real)

    prepare_output_dir(out, force=force, allow_existing=resume_from is not None)
    with output_lock(out):
        data_sim = TrainingSet(sim.model_input(), sim.require_labels())
        data_real = TrainingSet(real.model_input())
        run: dict[str, Any] = {"config_hash": config_hash(cfg), "seed": cfg.seed}
        if resume_from is not None:
            if not resume_from.exists():
                raise DataError(f"checkpoint not found: {resume_from}")
            state, stats = resume(resume_from, data_sim, data_real, cfg.train, checkpoint_dir=out, run=run)
        else:
            model = build_model(spec, RngStream(cfg.seed).child("model"))
            model.fit_normalization(data_sim.x, data_real.x)
            state = new_training_state(model, cfg.train)
            state.run = run
            stats = train(state, data_sim, data_real, cfg.train, checkpoint_dir=out)
        stats_path = stats.write_csv(out / STATS_FILE, append=resume_from is not None)
        config_file = out / CONFIG_FILE
        config_file.write_text(cfg.to_json() + "\n", encoding="utf-8")
        outputs = [out / FINAL_CHECKPOINT, config_file]
        write_manifest(
            out,
            command="train",
            config_hash=config_hash(cfg),
            seed=cfg.seed,
            inputs=hash_files([data_dir / SIM_FILE, data_dir / REAL_TRAIN_FILE], data_dir),
            outputs=outputs,
            extra={"epochs": state.epoch, "resumed_from": None if resume_from is None else resume_from.name},
        )
    return [*outputs, stats_path]


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def cmd_transfer(checkpoint: Path, in_path: Path, out_path: Path, *, force: bool = False) -> list[Path]:
    stored = _load_checkpoint(checkpoint)
    model = restore_model(stored)
    run = stored.metadata.get("run", {})
    sim = _load(in_path)
    if not sim.is_labeled:
        raise DataError(f"{in_path} has no class labels; transfer keeps each spectrum's own tissue label")
    if out_path.exists() and not force:
        raise DataError(f"{out_path} already exists; pass --force to overwrite")
    with output_lock(out_path.parent):
        started = time.perf_counter()
        transferred = transfer_dataset(model, sim)
        save_dataset(transferred, out_path)
        logging.info("transferred rows=%d duration_seconds=%.3f", len(transferred), time.perf_counter() - started)
        write_manifest(
            out_path.parent,
            command="transfer",
            config_hash=str(run.get("config_hash", "")),
            seed=int(run.get("seed", 0)),
            inputs=hash_files([checkpoint, in_path], in_path.parent),
            outputs=[out_path],
            name=f"{out_path.stem}.manifest.json",
        )
    return [out_path]


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _mean_transfer_shift(sim: SpectralDataset, transferred: SpectralDataset) -> float:
    return float(np.mean(np.linalg.norm(transferred.spectra - sim.spectra, axis=1)))


def cmd_eval(
    checkpoint: Path,
    data_dir: Path,
    out: Path,
    *,
    config_path: Path | None = None,
    transferred_path: Path | None = None,
    extra_checkpoints: dict[str, Path] | None = None,
    force: bool = False,
) -> list[Path]:
    cfg = _resolve_config(config_path, data_dir)
    model = _load_model(checkpoint)
    sim = _load(data_dir / SIM_FILE)
    real_test = _load(data_dir / REAL_TEST_FILE)
    if not real_test.is_labeled:
        raise DataError(f"{data_dir / REAL_TEST_FILE} has no test labels")
    labels_path = data_dir / REAL_TRAIN_LABELS_FILE
    if not labels_path.exists():
        raise DataError(f"missing hidden real-train labels {labels_path}")
    real_train = _load(data_dir / REAL_TRAIN_FILE)
    real_train_labels = load_labels(labels_path)
    if len(real_train_labels) != len(real_train):
        raise DataError(f"{len(real_train)} real-train spectra but {len(real_train_labels)} hidden labels")
    extra_models = {name: _load_model(path) for name, path in (extra_checkpoints or {}).items()}

    if transferred_path is not None:
        transferred = _load(transferred_path)
        if transferred.domain != "transferred" or len(transferred) != len(sim):
            raise DataError(f"{transferred_path} is not the transfer of {data_dir / SIM_FILE}")
    else:
        transferred = transfer_dataset(model, sim)

    prepare_output_dir(out, force=force)
    with output_lock(out):
        datasets = EvalDatasets(
            sim=sim,
            real_train=real_train,
            real_train_labels=real_train_labels,
            real_test=real_test,
            transferred=transferred,
        )
        report = run_downstream_eval(model, datasets, cfg.eval, extra_models=extra_models, workers=worker_count())
        outputs = write_report_csvs(report, out)
        summary = {
            "seed": cfg.eval.seed,
            "n_trees": cfg.eval.n_trees,
            "fraction_wavelengths_improved": report.fraction_improved(),
            "mean_transfer_shift": _mean_transfer_shift(sim, transferred),
            "pca_explained_variance_ratio": [float(v) for v in report.pca.explained_variance_ratio],
            "balanced_accuracy_order_holds": report.metric("sim", "balanced_accuracy")
            <= report.metric("transferred", "balanced_accuracy")
            <= report.metric("real", "balanced_accuracy"),
        }
        summary_path = out / SUMMARY_FILE
        summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        outputs.append(summary_path)
        runtimes_path = out / RUNTIMES_FILE
        runtimes_path.write_text(canonical_json(report.runtimes) + "\n", encoding="utf-8")
        plots = write_report_plots(report, out)
        inputs = hash_files([data_dir / name for name in (SIM_FILE, REAL_TRAIN_FILE, REAL_TEST_FILE)], data_dir)
        inputs.update(hash_files([checkpoint], checkpoint.parent))
        write_manifest(
            out,
            command="eval",
            config_hash=config_hash(cfg),
            seed=cfg.eval.seed,
            inputs=inputs,
            outputs=outputs,
        )
    return [*outputs, runtimes_path, *plots]


# ---------------------------------------------------------------------------
# report / run-all
# ---------------------------------------------------------------------------


def cmd_report(eval_dir: Path, out_path: Path | None = None) -> list[Path]:
    if not (eval_dir / "metrics.csv").exists():
        raise DataError(f"no metrics.csv in {eval_dir}; run the eval command first")
    return [build_report(eval_dir, out_path or eval_dir / "report.html")]


def run_step(name: str, action: Callable[[], list[Path]]) -> CommandResult:
    started = time.perf_counter()
    status = "success"
    outputs: list[Path] = []
    error: Exception | None = None
    try:
        outputs = action()
    except Exception as exc:
        logging.exception("%s failed", name)
        status = "failed"
        error = exc
    result = CommandResult(
        name=name,
        status=status,
        duration_seconds=time.perf_counter() - started,
        outputs=outputs,
        error=error,
    )
    logging.info(
        "summary command=%s status=%s outputs=%d duration_seconds=%.3f",
        result.name,
        result.status,
        len(result.outputs),
        result.duration_seconds,
    )
    return result


def cmd_run_all(
    config_path: Path | None,
    out: Path,
    *,
    seed: int | None = None,
    epochs: int | None = None,
    force: bool = False,
) -> list[CommandResult]:
    """generate-data, train, transfer, eval and report in sequence; a failed step skips the rest."""
    prepare_output_dir(out, force=force)
    data_dir, train_dir, eval_dir = out / "data", out / "train", out / "eval"
    transferred = out / "transfer" / TRANSFERRED_FILE
    checkpoint = train_dir / FINAL_CHECKPOINT
    steps: list[tuple[str, Callable[[], list[Path]]]] = [
        ("generate-data", lambda: cmd_generate_data(config_path, data_dir, seed=seed, force=force)),
        ("train", lambda: cmd_train(None, data_dir, train_dir, epochs=epochs, force=force)),
        ("transfer", lambda: cmd_transfer(checkpoint, data_dir / SIM_FILE, transferred, force=force)),
        ("eval", lambda: cmd_eval(checkpoint, data_dir, eval_dir, transferred_path=transferred, force=force)),
        ("report", lambda: cmd_report(eval_dir, out / "report.html")),
    ]
    results: list[CommandResult] = []
    failed = False
    for name, action in steps:
        if failed:
            results.append(CommandResult(name=name, status="skipped", duration_seconds=0.0))
            continue
        result = run_step(name, action)
        results.append(result)
        failed = result.status != "success"
    return results
