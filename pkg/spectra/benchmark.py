"""Two-domain synthetic benchmark: labeled simulations versus distorted "pseudo-real" spectra."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Final

import numpy as np
import numpy.typing as npt
from joblib import Parallel, delayed

from autodiff.rng import RngStream
from spectra.dataset import SpectralDataset
from spectra.distortion import get_distortion, make_pseudo_real
from spectra.knn_filter import KnnFilterConfig, knn_plausibility_filter
from spectra.simulator import LayerParams, TissueParams, simulate_spectrum, wavelength_grid

Range = tuple[float, float]
_CHUNK: Final[int] = 512


@dataclass(frozen=True)
class TissueClassConfig:
    name: str
    v_hb: Range
    so2: Range = (0.4, 1.0)
    # relative frequency among pseudo-real samples
    real_weight: float = 1.0

    def __post_init__(self) -> None:
        for label, (low, high) in (("v_hb", self.v_hb), ("so2", self.so2)):
            if not low <= high:
                raise ValueError(f"class {self.name}: {label} range ({low}, {high}) is reversed")
        if self.real_weight <= 0:
            raise ValueError(f"class {self.name}: real_weight must be positive")


@dataclass(frozen=True)
class OpticalRanges:
    """Ranges shared by every class; g and n are carried for completeness only."""

    a_mie: Range = (5.0, 50.0)
    b_mie: Range = (0.3, 3.0)
    d: Range = (0.002, 0.05)
    g: Range = (0.80, 0.95)
    n: Range = (1.33, 1.54)


DEFAULT_CLASSES: Final[tuple[TissueClassConfig, ...]] = (
    TissueClassConfig("low_perfusion", v_hb=(0.005, 0.02), real_weight=0.4),
    TissueClassConfig("moderate_perfusion", v_hb=(0.02, 0.05), real_weight=0.3),
    TissueClassConfig("high_perfusion", v_hb=(0.05, 0.10), real_weight=0.2),
    TissueClassConfig("vascular", v_hb=(0.10, 0.18), real_weight=0.1),
)
# Real tissue occupies a narrower part of the simulated optical space.
DEFAULT_REAL_RANGES: Final[OpticalRanges] = OpticalRanges(a_mie=(10.0, 30.0), b_mie=(0.8, 2.0))


@dataclass(frozen=True)
class BenchmarkConfig:
    classes: tuple[TissueClassConfig, ...] = DEFAULT_CLASSES
    n_sim: int = 20_000
    n_real_train: int = 20_000
    n_real_test: int = 5_000
    n_wavelengths: int = 64
    wavelength_range: Range = (500.0, 1000.0)
    n_layers: int = 3
    sim_ranges: OpticalRanges = field(default_factory=OpticalRanges)
    real_ranges: OpticalRanges = DEFAULT_REAL_RANGES
    distortion: str = "default"
    # simulate oversample * n_sim spectra and keep the n_sim most plausible
    oversample: float = 1.2
    knn_k: int = 5
    knn_reference_size: int = 5_000
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("benchmark needs at least one tissue class")
        if min(self.n_sim, self.n_real_train, self.n_real_test) < 1:
            raise ValueError("dataset sizes must be positive")
        if self.oversample < 1.0:
            raise ValueError(f"oversample must be >= 1, got {self.oversample}")
        if not 1 <= self.n_layers <= 3:
            raise ValueError(f"n_layers must be 1..3, got {self.n_layers}")
        get_distortion(self.distortion)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def class_overlaps(self) -> list[tuple[str, str]]:
        pairs = []
        for i, a in enumerate(self.classes):
            for b in self.classes[i + 1 :]:
                if a.v_hb[0] < b.v_hb[1] and b.v_hb[0] < a.v_hb[1]:
                    pairs.append((a.name, b.name))
        return pairs


@dataclass
class Benchmark:
    sim: SpectralDataset
    real_train: SpectralDataset
    # labels of real_train, used only by the real-trained reference classifier
    real_train_labels: npt.NDArray[np.int64]
    real_test: SpectralDataset


def _uniform(u: float, bounds: Range) -> float:
    return bounds[0] + u * (bounds[1] - bounds[0])


def sample_tissue(
    rng: RngStream, cfg: BenchmarkConfig, ranges: OpticalRanges, class_weights: npt.NDArray[np.float64]
) -> TissueParams:
    cumulative = np.cumsum(class_weights) / class_weights.sum()
    class_id = min(int(np.searchsorted(cumulative, rng.uniform(0.0, 1.0, 1)[0], side="right")), cfg.n_classes - 1)
    tissue = cfg.classes[class_id]
    u = rng.uniform(0.0, 1.0, (cfg.n_layers, 7))
    layers = tuple(
        LayerParams(
            v_hb=_uniform(row[0], tissue.v_hb),
            so2=_uniform(row[1], tissue.so2),
            a_mie=_uniform(row[2], ranges.a_mie),
            b_mie=_uniform(row[3], ranges.b_mie),
            d=_uniform(row[4], ranges.d),
            g=_uniform(row[5], ranges.g),
            n=_uniform(row[6], ranges.n),
        )
        for row in u
    )
    return TissueParams(layers=layers, class_id=class_id)


def _generate_rows(
    n: int,
    make_row: Callable[[int], tuple[npt.NDArray[np.float64], int]],
    workers: int,
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    """Rows 0..n-1 in order; each row depends only on its index, so any worker count gives the same result."""

    def run_chunk(start: int) -> list[tuple[npt.NDArray[np.float64], int]]:
        return [make_row(i) for i in range(start, min(start + _CHUNK, n))]

    chunks = Parallel(n_jobs=max(1, workers), prefer="threads")(
        delayed(run_chunk)(start) for start in range(0, n, _CHUNK)
    )
    rows = [row for chunk in chunks for row in chunk]
    return np.stack([r[0] for r in rows]), np.array([r[1] for r in rows], dtype=np.int64)


def generate_benchmark(cfg: BenchmarkConfig, *, workers: int = 1) -> Benchmark:
    for a, b in cfg.class_overlaps():
        logging.warning("benchmark classes %s and %s have overlapping v_hb ranges", a, b)
    root = RngStream(cfg.seed).child("benchmark")
    grid = wavelength_grid(cfg.n_wavelengths, *cfg.wavelength_range)
    distortion = get_distortion(cfg.distortion)
    uniform_weights = np.ones(cfg.n_classes)
    real_weights = np.array([c.real_weight for c in cfg.classes])

    def sim_row(i: int) -> tuple[npt.NDArray[np.float64], int]:
        params = sample_tissue(root.child("sim", i), cfg, cfg.sim_ranges, uniform_weights)
        return simulate_spectrum(params, grid).values, params.class_id

    def real_row(split: str) -> Callable[[int], tuple[npt.NDArray[np.float64], int]]:
        def make(i: int) -> tuple[npt.NDArray[np.float64], int]:
            stream = root.child(split, i)
            params = sample_tissue(stream.child("tissue"), cfg, cfg.real_ranges, real_weights)
            spectrum = make_pseudo_real(simulate_spectrum(params, grid), distortion, stream.child("distortion"))
            return spectrum.values, params.class_id

        return make

    metadata: dict[str, Any] = {
        "seed": cfg.seed,
        "distortion": cfg.distortion,
        "n_classes": cfg.n_classes,
        "class_names": [c.name for c in cfg.classes],
    }
    x_train, y_train = _generate_rows(cfg.n_real_train, real_row("real_train"), workers)
    x_test, y_test = _generate_rows(cfg.n_real_test, real_row("real_test"), workers)
    real_train = SpectralDataset(x_train, grid, "pseudo-real", labels=None, metadata=dict(metadata))
    real_test = SpectralDataset(x_test, grid, "pseudo-real", labels=y_test, metadata=dict(metadata))

    n_simulated = math.ceil(cfg.n_sim * cfg.oversample)
    x_sim, y_sim = _generate_rows(n_simulated, sim_row, workers)
    sim = SpectralDataset(x_sim, grid, "sim", labels=y_sim, metadata=dict(metadata))
    if n_simulated > cfg.n_sim:
        reference_rows = root.child("knn_reference").permutation(len(real_train))[: cfg.knn_reference_size]
        reference = real_train.subset(np.sort(reference_rows))
        knn = KnnFilterConfig(k=min(cfg.knn_k, len(reference)), quantile=cfg.n_sim / n_simulated)
        sim, _ = knn_plausibility_filter(sim, reference, knn)
        sim = sim.subset(np.arange(min(cfg.n_sim, len(sim))))

    logging.info(
        "benchmark generated sim=%d real_train=%d real_test=%d classes=%d distortion=%s",
        len(sim),
        len(real_train),
        len(real_test),
        cfg.n_classes,
        cfg.distortion,
    )
    return Benchmark(sim=sim, real_train=real_train, real_train_labels=y_train, real_test=real_test)
