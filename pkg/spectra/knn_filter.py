from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Final

import numpy as np
import numpy.typing as npt

from spectra.dataset import SpectralDataset

Array = npt.NDArray[np.float64]

_THRESHOLD_RTOL: Final[float] = 1e-9


@dataclass(frozen=True)
class KnnFilterConfig:
    k: int = 5
    quantile: float = 0.9
    chunk_size: int = 1024

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.quantile <= 1.0:
            raise ValueError(f"quantile must lie in (0, 1], got {self.quantile}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")


def mean_knn_distance(queries: Array, reference: Array, k: int, chunk_size: int = 1024) -> Array:
    """Mean Euclidean distance from each query row to its ``k`` nearest reference rows."""
    if k > len(reference):
        raise ValueError(f"k={k} exceeds the {len(reference)} reference spectra")
    ref_sq = np.einsum("ij,ij->i", reference, reference)
    out = np.empty(len(queries))
    for start in range(0, len(queries), chunk_size):
        chunk = queries[start : start + chunk_size]
        sq = np.einsum("ij,ij->i", chunk, chunk)[:, None] + ref_sq[None, :] - 2.0 * chunk @ reference.T
        dist = np.sqrt(np.maximum(sq, 0.0))
        nearest = np.partition(dist, k - 1, axis=1)[:, :k]
        out[start : start + chunk_size] = nearest.mean(axis=1)
    return out


def knn_plausibility_filter(
    sim: SpectralDataset,
    real: SpectralDataset,
    cfg: KnnFilterConfig,
    *,
    threshold: float | None = None,
) -> tuple[SpectralDataset, float]:
    """Keep simulated spectra whose mean distance to their k nearest real spectra is small.

    The cut-off is the ``cfg.quantile`` quantile of that distance over ``sim``
    unless an explicit ``threshold`` is given. Re-filtering the output with the
    returned threshold removes nothing further.
    """
    if not sim.same_grid(real):
        raise ValueError("sim and real spectra use different wavelength grids")
    distances = mean_knn_distance(sim.spectra, real.spectra, cfg.k, cfg.chunk_size)
    if threshold is None:
        threshold = float(np.max(distances)) if cfg.quantile >= 1.0 else float(np.quantile(distances, cfg.quantile))
    # relative slack absorbs last-bit differences between chunked evaluations
    keep = distances <= threshold * (1.0 + _THRESHOLD_RTOL)
    logging.info(
        "knn filter kept=%d of=%d k=%d quantile=%.3f threshold=%.6g",
        int(keep.sum()),
        len(sim),
        cfg.k,
        cfg.quantile,
        threshold,
    )
    filtered = sim.subset(keep)
    filtered.metadata["knn_threshold"] = threshold
    return filtered, threshold
