from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Final, Union

import numpy as np
import numpy.typing as npt

from autodiff.nn import MLP
from autodiff.rng import RngStream
from autodiff.tensor import ShapeError, Tensor, concat, split

INV_SQRT2: Final[float] = 1.0 / math.sqrt(2.0)
_MAX_PERMUTATION_DRAWS: Final[int] = 64


def clamp_scale(s: Tensor, alpha: float) -> Tensor:
    """Soft clamp alpha * (2/pi) * arctan(s / alpha); odd, monotone, bounded by alpha."""
    if alpha <= 0.0:
        raise ValueError(f"clamp alpha must be positive, got {alpha}")
    return (s * (1.0 / alpha)).arctan() * (alpha * 2.0 / math.pi)


# ---------------------------------------------------------------------------
# Haar wavelet downsampling (orthonormal, log-det 0)
# ---------------------------------------------------------------------------


def _require_even(op: str, length: int, axis_name: str) -> None:
    if length % 2:
        raise ShapeError(
            f"{op}: {axis_name} must be even, got {length}; pad the data when building the dataset"
        )


def haar_forward_1d(x: Tensor) -> Tensor:
    """(B, C, 2m) -> (B, 2C, m): average channels first, then difference channels."""
    if x.ndim != 3:
        raise ShapeError(f"haar_forward_1d expects (B, C, L), got {x.shape}")
    batch, channels, length = x.shape
    _require_even("haar_forward_1d", length, "length")
    half = length // 2
    a, b = split(x.reshape((batch, channels, half, 2)), 2, axis=3)
    avg = ((a + b) * INV_SQRT2).reshape((batch, channels, half))
    diff = ((a - b) * INV_SQRT2).reshape((batch, channels, half))
    return concat([avg, diff], axis=1)


def haar_inverse_1d(y: Tensor) -> Tensor:
    if y.ndim != 3 or y.shape[1] % 2:
        raise ShapeError(f"haar_inverse_1d expects (B, 2C, m), got {y.shape}")
    batch, channels2, half = y.shape
    channels = channels2 // 2
    avg, diff = split(y, 2, axis=1)
    a = ((avg + diff) * INV_SQRT2).reshape((batch, channels, half, 1))
    b = ((avg - diff) * INV_SQRT2).reshape((batch, channels, half, 1))
    return concat([a, b], axis=3).reshape((batch, channels, 2 * half))


def haar_forward_2d(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, 4C, H/2, W/2) with sub-bands stacked LL, LH, HL, HH."""
    if x.ndim != 4:
        raise ShapeError(f"haar_forward_2d expects (B, C, H, W), got {x.shape}")
    batch, channels, height, width = x.shape
    _require_even("haar_forward_2d", height, "height")
    _require_even("haar_forward_2d", width, "width")
    h, w = height // 2, width // 2
    blocks = x.reshape((batch, channels, h, 2, w, 2))
    top, bottom = split(blocks, 2, axis=3)
    a, b = split(top, 2, axis=5)
    c, d = split(bottom, 2, axis=5)
    out_shape = (batch, channels, h, w)
    ll = ((a + b + c + d) * 0.5).reshape(out_shape)
    lh = ((a - b + c - d) * 0.5).reshape(out_shape)
    hl = ((a + b - c - d) * 0.5).reshape(out_shape)
    hh = ((a - b - c + d) * 0.5).reshape(out_shape)
    return concat([ll, lh, hl, hh], axis=1)


def haar_inverse_2d(y: Tensor) -> Tensor:
    if y.ndim != 4 or y.shape[1] % 4:
        raise ShapeError(f"haar_inverse_2d expects (B, 4C, h, w), got {y.shape}")
    batch, channels4, h, w = y.shape
    channels = channels4 // 4
    ll, lh, hl, hh = split(y, 4, axis=1)
    block_shape = (batch, channels, h, 1, w, 1)
    a = ((ll + lh + hl + hh) * 0.5).reshape(block_shape)
    b = ((ll - lh + hl - hh) * 0.5).reshape(block_shape)
    c = ((ll + lh - hl - hh) * 0.5).reshape(block_shape)
    d = ((ll - lh - hl + hh) * 0.5).reshape(block_shape)
    top = concat([a, b], axis=5)
    bottom = concat([c, d], axis=5)
    return concat([top, bottom], axis=3).reshape((batch, channels, 2 * h, 2 * w))


@dataclass(frozen=True)
class HaarLayer:
    spatial_ndim: int

    def __post_init__(self) -> None:
        if self.spatial_ndim not in (1, 2):
            raise ValueError(f"Haar layer supports 1 or 2 spatial axes, got {self.spatial_ndim}")

    @property
    def channel_multiplier(self) -> int:
        return 2 if self.spatial_ndim == 1 else 4

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        channels, *spatial = shape
        for length in spatial:
            _require_even("haar", length, "spatial size")
        return (channels * self.channel_multiplier, *(length // 2 for length in spatial))

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        return (haar_forward_1d(x) if self.spatial_ndim == 1 else haar_forward_2d(x)), None

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> Tensor:
        return haar_inverse_1d(y) if self.spatial_ndim == 1 else haar_inverse_2d(y)


# ---------------------------------------------------------------------------
# Fixed permutation over the flattened feature vector
# ---------------------------------------------------------------------------


def _flatten(x: Tensor) -> Tensor:
    return x.reshape((x.shape[0], -1)) if x.ndim != 2 else x


@dataclass(frozen=True)
class PermutationLayer:
    perm: npt.NDArray[np.int64]
    inverse_perm: npt.NDArray[np.int64]

    @classmethod
    def from_perm(cls, perm: npt.NDArray[np.int64]) -> PermutationLayer:
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError("perm is not a permutation of 0..n-1")
        return cls(perm=perm, inverse_perm=np.argsort(perm).astype(np.int64))

    @classmethod
    def random(cls, features: int, split_index: int, rng: RngStream) -> PermutationLayer:
        """Draw a permutation that moves at least one feature across the coupling split."""
        first_half = set(range(split_index))
        perm = rng.permutation(features)
        for _ in range(_MAX_PERMUTATION_DRAWS):
            if features < 2 or set(perm[:split_index].tolist()) != first_half:
                break
            perm = rng.permutation(features)
        else:
            perm = np.roll(np.arange(features, dtype=np.int64), split_index)
        return cls.from_perm(perm)

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        return _flatten(x).take(self.perm, axis=1).reshape(x.shape), None

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> Tensor:
        return _flatten(y).take(self.inverse_perm, axis=1).reshape(y.shape)


# ---------------------------------------------------------------------------
# Fixed per-feature standardization (not trained)
# ---------------------------------------------------------------------------


@dataclass
class FixedAffineLayer:
    shift: npt.NDArray[np.float64]
    scale: npt.NDArray[np.float64]

    @classmethod
    def identity(cls, features: int) -> FixedAffineLayer:
        return cls(shift=np.zeros(features), scale=np.ones(features))

    def __post_init__(self) -> None:
        if self.shift.shape != self.scale.shape or self.scale.ndim != 1:
            raise ShapeError(f"shift {self.shift.shape} and scale {self.scale.shape} must be equal 1-D shapes")
        if np.any(self.scale <= 0.0):
            raise ValueError("normalization scale must be strictly positive")

    def log_det(self) -> float:
        return float(-np.sum(np.log(self.scale)))

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        flat = _flatten(x)
        self._check(flat)
        y = (flat - Tensor(self.shift)) * Tensor(1.0 / self.scale)
        return y.reshape(x.shape), Tensor(np.full(x.shape[0], self.log_det()))

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> Tensor:
        flat = _flatten(y)
        self._check(flat)
        return (flat * Tensor(self.scale) + Tensor(self.shift)).reshape(y.shape)

    def _check(self, flat: Tensor) -> None:
        if flat.shape[1] != self.scale.size:
            raise ShapeError(f"normalization expects {self.scale.size} features, got {flat.shape[1]}")


# ---------------------------------------------------------------------------
# Affine conditional coupling
# ---------------------------------------------------------------------------


@dataclass
class CouplingBlock:
    """y1 = x1, y2 = x2 * exp(s) + t with (s, t) computed from x1 and the condition."""

    features: int
    split_index: int
    subnet_s: MLP
    subnet_t: MLP
    clamp_alpha: float
    condition: str
    cond_dim: int

    @classmethod
    def create(
        cls,
        features: int,
        cond_dim: int,
        hidden: tuple[int, ...],
        rng: RngStream,
        *,
        clamp_alpha: float = 1.0,
        condition: str = "DY",
    ) -> CouplingBlock:
        split_index = features // 2
        if not 0 < split_index < features:
            raise ValueError(f"coupling needs at least 2 features, got {features}")
        out = features - split_index
        subnet_in = split_index + cond_dim
        return cls(
            features=features,
            split_index=split_index,
            subnet_s=MLP.create(subnet_in, hidden, out, rng.child("s"), zero_final=True),
            subnet_t=MLP.create(subnet_in, hidden, out, rng.child("t"), zero_final=True),
            clamp_alpha=clamp_alpha,
            condition=condition,
            cond_dim=cond_dim,
        )

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.subnet_s.parameters(f"{prefix}s."), **self.subnet_t.parameters(f"{prefix}t.")}

    def scale_and_shift(self, x1: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        if self.cond_dim:
            if cond is None or cond.ndim != 2 or cond.shape != (x1.shape[0], self.cond_dim):
                got = None if cond is None else cond.shape
                raise ShapeError(f"coupling expects condition of shape ({x1.shape[0]}, {self.cond_dim}), got {got}")
            inputs = concat([x1, cond], axis=1)
        else:
            inputs = x1
        return clamp_scale(self.subnet_s(inputs), self.clamp_alpha), self.subnet_t(inputs)

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        y, logdet = coupling_forward(x, cond, self)
        return y, logdet

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> Tensor:
        return coupling_inverse(y, cond, self)

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        flat = _flatten(x)
        if flat.shape[1] != self.features:
            raise ShapeError(f"coupling expects {self.features} features, got {flat.shape[1]} (shape {x.shape})")
        first, second = split(flat, [self.split_index, self.features - self.split_index], axis=1)
        return first, second


def coupling_forward(x: Tensor, cond: Tensor | None, block: CouplingBlock) -> tuple[Tensor, Tensor]:
    x1, x2 = block._split(x)
    s, t = block.scale_and_shift(x1, cond)
    y2 = x2 * s.exp() + t
    return concat([x1, y2], axis=1).reshape(x.shape), s.sum(axis=1)


def coupling_inverse(y: Tensor, cond: Tensor | None, block: CouplingBlock) -> Tensor:
    y1, y2 = block._split(y)
    s, t = block.scale_and_shift(y1, cond)
    x2 = (y2 - t) * (-s).exp()
    return concat([y1, x2], axis=1).reshape(y.shape)


FlowLayer = Union[HaarLayer, PermutationLayer, CouplingBlock]
