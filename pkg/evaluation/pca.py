from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]


@dataclass(frozen=True)
class PcaModel:
    mean: Array
    components: Array  # (k, d), orthonormal rows
    explained_variance: Array
    explained_variance_ratio: Array

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])


def pca_fit(data: Array, n_components: int = 2, *, rank_tol: float = 1e-12) -> PcaModel:
    """Eigendecomposition of the sample covariance; components sorted by variance.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    Directions with (numerically) zero variance are dropped with a warning.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"PCA expects (n, d) data, got shape {x.shape}")
    if n_components < 1 or n_components > x.shape[1]:
        raise ValueError(f"n_components must lie in [1, {x.shape[1]}], got {n_components}")
    if x.shape[0] < max(2, n_components):
        raise ValueError(f"PCA with {n_components} components needs at least {max(2, n_components)} rows")

    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(covariance)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order].T

    total = float(eigvals.sum())
    usable = int(np.sum(eigvals > rank_tol * max(eigvals[0], 0.0))) if total > 0 else 0
    if usable < n_components:
        logging.warning("PCA input has rank %d; returning %d of %d requested components", usable, usable, n_components)
        n_components = max(usable, 1) if total > 0 else 0
    if n_components == 0:
        raise ValueError("PCA input has zero variance")

    components = eigvecs[:n_components]
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(n_components), pivots])
    components = components * signs[:, None]
    kept = eigvals[:n_components]
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=kept,
        explained_variance_ratio=kept / total,
    )


def pca_project(model: PcaModel, data: Array) -> Array:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.mean.size:
        raise ValueError(f"data of shape {x.shape} does not match a {model.mean.size}-dimensional PCA")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, coordinates: Array) -> Array:
    return coordinates @ model.components + model.mean
