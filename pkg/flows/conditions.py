from __future__ import annotations

from dataclasses import dataclass
from typing import Final

import numpy as np
import numpy.typing as npt

from autodiff.rng import RngStream
from autodiff.tensor import ShapeError

DOMAIN_SIM: Final[int] = 0
DOMAIN_REAL: Final[int] = 1
N_DOMAINS: Final[int] = 2
DOMAIN_NAMES: Final[dict[str, int]] = {"sim": DOMAIN_SIM, "real": DOMAIN_REAL}

# Per-block condition selectors: domain and tissue, domain only, or nothing.
SELECTORS: Final[tuple[str, ...]] = ("DY", "D", "None")

IntArray = npt.NDArray[np.int64]


@dataclass(frozen=True)
class Condition:
    """Domain id per sample plus a tissue label (class id or per-position label map)."""

    domain: IntArray
    tissue: IntArray
    n_classes: int

    def __post_init__(self) -> None:
        domain = np.asarray(self.domain, dtype=np.int64)
        tissue = np.asarray(self.tissue, dtype=np.int64)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "tissue", tissue)
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if domain.ndim != 1 or tissue.ndim < 1 or tissue.shape[0] != domain.shape[0]:
            raise ShapeError(f"domain {domain.shape} and tissue {tissue.shape} disagree on batch size")
        if np.any((domain < 0) | (domain >= N_DOMAINS)):
            raise ValueError("domain ids must be 0 (sim) or 1 (real)")
        if np.any((tissue < 0) | (tissue >= self.n_classes)):
            raise ValueError(f"tissue ids must lie in [0, {self.n_classes})")

    @classmethod
    def for_domain(cls, domain: int, tissue: IntArray, n_classes: int) -> Condition:
        tissue = np.asarray(tissue, dtype=np.int64)
        return cls(domain=np.full(tissue.shape[0], domain, dtype=np.int64), tissue=tissue, n_classes=n_classes)

    @property
    def batch_size(self) -> int:
        return int(self.domain.shape[0])

    @property
    def is_map(self) -> bool:
        return self.tissue.ndim > 1

    def with_domain(self, domain: int) -> Condition:
        return Condition.for_domain(domain, self.tissue, self.n_classes)

    def subset(self, rows: IntArray | slice) -> Condition:
        return Condition(domain=self.domain[rows], tissue=self.tissue[rows], n_classes=self.n_classes)


def one_hot(ids: IntArray, n: int) -> npt.NDArray[np.float64]:
    return np.eye(n, dtype=np.float64)[np.asarray(ids, dtype=np.int64)]


def pool_label_map(labels: IntArray, spatial: tuple[int, ...], n_classes: int) -> IntArray:
    """Majority label of each block when shrinking (B, *full) maps to (B, *spatial).

    Ties go to the smallest class id.
    """
    labels = np.asarray(labels, dtype=np.int64)
    full = labels.shape[1:]
    if len(full) != len(spatial):
        raise ShapeError(f"label map {full} and target {spatial} have different ranks")
    if full == spatial:
        return labels
    factors = []
    for size, target in zip(full, spatial):
        if target < 1 or size % target:
            raise ShapeError(f"label map {full} cannot be pooled to {spatial}")
        factors.append(size // target)
    counts = one_hot(labels, n_classes)
    # (B, t0, f0, t1, f1, ..., K): sum over every factor axis
    blocked_shape: list[int] = [labels.shape[0]]
    for target, factor in zip(spatial, factors):
        blocked_shape += [target, factor]
    counts = counts.reshape((*blocked_shape, n_classes))
    factor_axes = tuple(2 + 2 * i for i in range(len(spatial)))
    return np.argmax(counts.sum(axis=factor_axes), axis=-1).astype(np.int64)


def condition_dim(selector: str, n_classes: int, tissue_spatial: tuple[int, ...] | None) -> int:
    """Width of the encoded condition; ``tissue_spatial`` is the pooled map shape or None for vectors."""
    if selector == "None":
        return 0
    if selector == "D":
        return N_DOMAINS
    if selector == "DY":
        positions = 1 if tissue_spatial is None else int(np.prod(tissue_spatial))
        return N_DOMAINS + n_classes * positions
    raise ValueError(f"unknown condition selector {selector!r}; expected one of {SELECTORS}")


def encode_condition(
    cond: Condition, selector: str, spatial: tuple[int, ...]
) -> npt.NDArray[np.float64] | None:
    """Flat (B, F) condition features for a block whose features have spatial shape ``spatial``."""
    if selector == "None":
        return None
    domain = one_hot(cond.domain, N_DOMAINS)
    if selector == "D":
        return domain
    if selector != "DY":
        raise ValueError(f"unknown condition selector {selector!r}; expected one of {SELECTORS}")
    if cond.is_map:
        pooled = pool_label_map(cond.tissue, spatial, cond.n_classes)
        # position-major: (B, *spatial, K) -> (B, K * positions) channel-first
        tissue = np.moveaxis(one_hot(pooled, cond.n_classes), -1, 1).reshape(cond.batch_size, -1)
    else:
        tissue = one_hot(cond.tissue, cond.n_classes)
    return np.concatenate([domain, tissue], axis=1)


def sample_proxy_label(
    rng: RngStream,
    n_classes: int,
    batch: int,
    map_shape: tuple[int, ...] | None = None,
    *,
    n_regions: int = 2,
) -> IntArray:
    """Random tissue labels for unlabeled real samples.

    Vector labels are uniform over the classes. Label maps start from a random
    background class and receive ``n_regions`` random axis-aligned boxes, each
    filled with a random class.
    """
    if n_classes < 1:
        raise ValueError("proxy labels need at least one class")
    if map_shape is None:
        return rng.integers(0, n_classes, batch)

    maps = np.repeat(rng.integers(0, n_classes, batch), int(np.prod(map_shape))).reshape((batch, *map_shape))
    for _ in range(n_regions):
        classes = rng.integers(0, n_classes, batch)
        bounds = [np.sort(rng.integers(0, size + 1, (batch, 2)), axis=1) for size in map_shape]
        for row in range(batch):
            box = tuple(slice(int(b[row, 0]), int(b[row, 1])) for b in bounds)
            maps[(row, *box)] = classes[row]
    return maps
