"""Downstream evaluation: random forests trained per data source, scored on held-out real spectra."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final

import numpy as np
import numpy.typing as npt

from autodiff.rng import RngStream
from evaluation.forest import ForestConfig, rf_predict, rf_predict_proba, rf_train
from evaluation.metrics import auroc_weighted, balanced_accuracy, f1_weighted
from evaluation.pca import PcaModel, pca_fit, pca_project
from evaluation.transfer import transfer_dataset
from flows.model import FlowModel
from spectra.dataset import SpectralDataset

Array = npt.NDArray[np.float64]

METRIC_NAMES: Final[tuple[str, ...]] = ("balanced_accuracy", "auroc", "f1_weighted")
CORE_SOURCES: Final[tuple[str, ...]] = ("sim", "transferred", "real")


@dataclass(frozen=True)
class EvalConfig:
    n_trees: int = 100
    max_train_samples: int = 5_000
    pca_components: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_train_samples < 2:
            raise ValueError("max_train_samples must be >= 2")


@dataclass
class EvalDatasets:
    sim: SpectralDataset
    real_train: SpectralDataset
    # hidden labels of real_train, seen only by the real-trained reference forest
    real_train_labels: npt.NDArray[np.int64]
    real_test: SpectralDataset
    transferred: SpectralDataset | None = None


@dataclass(frozen=True)
class SourceMetrics:
    source: str
    balanced_accuracy: float
    auroc: float
    f1_weighted: float

    def values(self) -> tuple[float, float, float]:
        return (self.balanced_accuracy, self.auroc, self.f1_weighted)


@dataclass
class EvalReport:
    metrics: list[SourceMetrics]
    wavelengths: Array
    pca: PcaModel
    pca_coordinates: dict[str, Array]
    pca_labels: dict[str, npt.NDArray[np.int64]]
    abs_diff: dict[str, Array]
    class_means: dict[str, Array]
    runtimes: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def metric(self, source: str, name: str) -> float:
        for row in self.metrics:
            if row.source == source:
                return float(getattr(row, name))
        raise KeyError(f"no metrics for source {source!r}")

    def fraction_improved(self, candidate: str = "transferred", baseline: str = "sim") -> float:
        """Share of wavelengths where ``candidate`` is closer to the real class means than ``baseline``."""
        return float(np.mean(self.abs_diff[candidate] < self.abs_diff[baseline]))


def class_means(spectra: Array, labels: npt.NDArray[np.int64], n_classes: int) -> Array:
    """(n_classes, L) mean spectrum per class; NaN rows for absent classes."""
    means = np.full((n_classes, spectra.shape[1]), np.nan)
    for c in range(n_classes):
        rows = labels == c
        if rows.any():
            means[c] = spectra[rows].mean(axis=0)
    return means


def per_wavelength_abs_diff(
    set_a: Array,
    set_b: Array,
    labels_a: npt.NDArray[np.int64] | None = None,
    labels_b: npt.NDArray[np.int64] | None = None,
) -> Array:
    """|mean_a - mean_b| per wavelength.

    With labels, the difference is taken per class and averaged with the
    class support of ``set_b``; classes missing from ``set_a`` are skipped.
    """
    if set_a.shape[1] != set_b.shape[1]:
        raise ValueError(f"wavelength counts differ: {set_a.shape[1]} vs {set_b.shape[1]}")
    if labels_a is None or labels_b is None:
        return np.abs(set_a.mean(axis=0) - set_b.mean(axis=0))
    classes, support = np.unique(labels_b, return_counts=True)
    diffs, weights = [], []
    for c, count in zip(classes, support):
        rows_a = labels_a == c
        if not rows_a.any():
            logging.warning("class %d missing from the compared set; skipped in per-wavelength difference", c)
            continue
        diffs.append(np.abs(set_a[rows_a].mean(axis=0) - set_b[labels_b == c].mean(axis=0)))
        weights.append(count)
    if not diffs:
        raise ValueError("no class occurs in both sets")
    return np.average(np.stack(diffs), axis=0, weights=np.array(weights, dtype=np.float64))


def _subsample(x: Array, y: npt.NDArray[np.int64], limit: int, rng: RngStream) -> tuple[Array, npt.NDArray[np.int64]]:
    if len(x) <= limit:
        return x, y
    rows = np.sort(rng.permutation(len(x))[:limit])
    return x[rows], y[rows]


def _score_source(
    name: str,
    x_train: Array,
    y_train: npt.NDArray[np.int64],
    test: SpectralDataset,
    cfg: EvalConfig,
    workers: int,
) -> SourceMetrics:
    root = RngStream(cfg.seed).child("eval", name)
    x, y = _subsample(x_train, y_train, cfg.max_train_samples, root.child("subsample"))
    forest = rf_train(x, y, ForestConfig(n_trees=cfg.n_trees), root.child("forest"), workers=workers)
    y_test = test.require_labels()
    probs = rf_predict_proba(forest, test.spectra)
    predicted = rf_predict(forest, test.spectra)
    return SourceMetrics(
        source=name,
        balanced_accuracy=balanced_accuracy(y_test, predicted),
        auroc=auroc_weighted(y_test, probs, forest.classes),
        f1_weighted=f1_weighted(y_test, predicted),
    )


def run_downstream_eval(
    model: FlowModel | None,
    datasets: EvalDatasets,
    cfg: EvalConfig,
    *,
    extra_models: dict[str, FlowModel] | None = None,
    workers: int = 1,
) -> EvalReport:
    """Train forests on sim, transferred and real spectra (plus any extra transfer models) and score them on the real test set.

    Only the real-trained reference forest sees real training labels; the
    transfer path receives simulated data and its own labels only.
    """
    if not datasets.real_test.is_labeled:
        raise ValueError("real test set has no labels")
    transferred = datasets.transferred
    if transferred is None:
        if model is None:
            raise ValueError("need either a transferred dataset or a model to produce one")
        transferred = transfer_dataset(model, datasets.sim)
    sources: dict[str, SpectralDataset] = {"sim": datasets.sim, "transferred": transferred}
    for name, extra in (extra_models or {}).items():
        if name in CORE_SOURCES:
            raise ValueError(f"extra source name {name!r} clashes with a core source")
        sources[name] = transfer_dataset(extra, datasets.sim)

    test = datasets.real_test
    runtimes: dict[str, float] = {}
    metrics: list[SourceMetrics] = []
    train_sets: dict[str, tuple[Array, npt.NDArray[np.int64]]] = {
        name: (data.spectra, data.require_labels()) for name, data in sources.items()
    }
    train_sets["real"] = (datasets.real_train.spectra, datasets.real_train_labels)
    ordered = [*CORE_SOURCES, *(n for n in train_sets if n not in CORE_SOURCES)]
    for name in ordered:
        started = time.perf_counter()
        x_train, y_train = train_sets[name]
        row = _score_source(name, x_train, y_train, test, cfg, workers)
        runtimes[f"forest_{name}"] = time.perf_counter() - started
        metrics.append(row)
        logging.info(
            "eval source=%s balanced_accuracy=%.4f auroc=%.4f f1_weighted=%.4f duration_seconds=%.3f",
            name,
            row.balanced_accuracy,
            row.auroc,
            row.f1_weighted,
            runtimes[f"forest_{name}"],
        )

    # PCA basis from real data only
    pca = pca_fit(test.spectra, cfg.pca_components)
    coords = {"real": pca_project(pca, test.spectra)}
    pca_labels = {"real": test.require_labels()}
    for name, data in sources.items():
        coords[name] = pca_project(pca, data.spectra)
        pca_labels[name] = data.require_labels()

    y_test = test.require_labels()
    n_classes = max(test.n_classes, datasets.sim.n_classes, *(int(labels.max()) + 1 for labels in pca_labels.values()))
    abs_diff = {
        name: per_wavelength_abs_diff(data.spectra, test.spectra, data.require_labels(), y_test)
        for name, data in sources.items()
    }
    means = {"real": class_means(test.spectra, y_test, n_classes)}
    for name, data in sources.items():
        means[name] = class_means(data.spectra, data.require_labels(), n_classes)

    return EvalReport(
        metrics=metrics,
        wavelengths=test.wavelengths,
        pca=pca,
        pca_coordinates=coords,
        pca_labels=pca_labels,
        abs_diff=abs_diff,
        class_means=means,
        runtimes=runtimes,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.10f}"


def write_metrics_csv(report: EvalReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["source", *METRIC_NAMES])
        for row in report.metrics:
            writer.writerow([row.source, *(_fmt(v) for v in row.values())])
    return path


def write_pca_csv(report: EvalReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = report.pca.n_components
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["dataset", "class", *(f"pc{i + 1}" for i in range(n))])
        for name, coords in report.pca_coordinates.items():
            labels = report.pca_labels[name]
            for label, point in zip(labels, coords):
                writer.writerow([name, int(label), *(_fmt(v) for v in point)])
    return path


def write_wavelength_diff_csv(report: EvalReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(report.abs_diff)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["wavelength_nm", *names])
        for index, wavelength in enumerate(report.wavelengths):
            writer.writerow([f"{wavelength:.4f}", *(_fmt(report.abs_diff[n][index]) for n in names)])
    return path


def write_report_csvs(report: EvalReport, directory: Path) -> list[Path]:
    return [
        write_metrics_csv(report, directory / "metrics.csv"),
        write_pca_csv(report, directory / "pca_coordinates.csv"),
        write_wavelength_diff_csv(report, directory / "wavelength_diff.csv"),
    ]


def read_metrics_csv(path: Path) -> list[SourceMetrics]:
    with path.open(newline="", encoding="utf-8") as handle:
        return [
            SourceMetrics(
                source=record["source"],
                balanced_accuracy=float(record["balanced_accuracy"]),
                auroc=float(record["auroc"]),
                f1_weighted=float(record["f1_weighted"]),
            )
            for record in csv.DictReader(handle)
        ]
