"""Multi-scale conditional invertible network: f(x, condition) and its exact inverse."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Final, Sequence

import numpy as np
import numpy.typing as npt

from autodiff.rng import RngStream
from autodiff.tensor import ShapeError, Tensor
from flows.conditions import (
    DOMAIN_REAL,
    SELECTORS,
    Condition,
    condition_dim,
    encode_condition,
    sample_proxy_label,
)
from flows.layers import CouplingBlock, FixedAffineLayer, FlowLayer, HaarLayer, PermutationLayer

TISSUE_MODES: Final[tuple[str, ...]] = ("vector", "map")
_SCHEDULE_TERM = re.compile(r"^\s*(\d+)\s*[x×]\s*(DY|D|None)\s*$")


def parse_condition_schedule(text: str) -> tuple[str, ...]:
    """Expand ``"30xDY + 10xNone"`` into one selector per block, in order."""
    selectors: list[str] = []
    for term in text.split("+"):
        match = _SCHEDULE_TERM.match(term)
        if match is None:
            raise ValueError(f"bad condition schedule term {term.strip()!r} in {text!r}")
        selectors += [match.group(2)] * int(match.group(1))
    return tuple(selectors)


def expand_per_scale(per_scale: Sequence[str], blocks_per_scale: Sequence[int]) -> tuple[str, ...]:
    if len(per_scale) != len(blocks_per_scale):
        raise ValueError(f"{len(per_scale)} per-scale conditions for {len(blocks_per_scale)} scales")
    return tuple(sel for sel, n in zip(per_scale, blocks_per_scale) for _ in range(n))


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    blocks_per_scale: tuple[int, ...]
    condition_per_block: tuple[str, ...]
    n_classes: int
    tissue_mode: str = "vector"
    hidden_layers: int = 2
    hidden_width: int = 128
    clamp_alpha: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks_per_scale", tuple(int(v) for v in self.blocks_per_scale))
        object.__setattr__(self, "condition_per_block", tuple(str(v) for v in self.condition_per_block))
        if len(self.input_shape) not in (2, 3):
            raise ValueError(f"input_shape must be (C, L) or (C, H, W), got {self.input_shape}")
        if not self.blocks_per_scale or any(n < 1 for n in self.blocks_per_scale):
            raise ValueError(f"blocks_per_scale must be non-empty and positive, got {self.blocks_per_scale}")
        if len(self.condition_per_block) != self.n_blocks:
            raise ValueError(
                f"{len(self.condition_per_block)} condition selectors for {self.n_blocks} blocks"
            )
        unknown = sorted(set(self.condition_per_block) - set(SELECTORS))
        if unknown:
            raise ValueError(f"unknown condition selectors {unknown}; expected {SELECTORS}")
        if self.tissue_mode not in TISSUE_MODES:
            raise ValueError(f"tissue_mode must be one of {TISSUE_MODES}, got {self.tissue_mode!r}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.hidden_layers < 0 or self.hidden_width < 1:
            raise ValueError("subnet needs hidden_layers >= 0 and hidden_width >= 1")
        if self.clamp_alpha <= 0:
            raise ValueError("clamp_alpha must be positive")
        self.check_divisible()

    # -- presets ----------------------------------------------------------

    @classmethod
    def spectral_desk(cls, n_classes: int, length: int = 64) -> ModelSpec:
        return cls(
            input_shape=(1, length),
            blocks_per_scale=(8,),
            condition_per_block=parse_condition_schedule("6xDY + 2xNone"),
            n_classes=n_classes,
            hidden_width=128,
        )

    @classmethod
    def image_desk(cls, n_classes: int, size: int = 16) -> ModelSpec:
        blocks = (2, 2, 1)
        return cls(
            input_shape=(1, size, size),
            blocks_per_scale=blocks,
            condition_per_block=expand_per_scale(("DY", "D", "D"), blocks),
            n_classes=n_classes,
            tissue_mode="map",
            hidden_width=64,
        )

    @classmethod
    def hsi_default(cls, n_classes: int, length: int = 100) -> ModelSpec:
        return cls(
            input_shape=(1, length),
            blocks_per_scale=(40,),
            condition_per_block=parse_condition_schedule("30xDY + 10xNone"),
            n_classes=n_classes,
            hidden_width=512,
        )

    @classmethod
    def pat_default(cls, n_classes: int, size: int = 32) -> ModelSpec:
        blocks = (4, 2, 1, 1, 2)
        return cls(
            input_shape=(1, size, size),
            blocks_per_scale=blocks,
            condition_per_block=expand_per_scale(("DY", "D", "D", "D", "D"), blocks),
            n_classes=n_classes,
            tissue_mode="map",
            hidden_width=64,
        )

    def with_condition_mode(self, mode: str) -> ModelSpec:
        """Swap every DY block to ``mode`` (``"D"`` gives the tissue-free ablation)."""
        if mode not in SELECTORS:
            raise ValueError(f"unknown condition selector {mode!r}")
        return replace(self, condition_per_block=tuple(mode if sel == "DY" else sel for sel in self.condition_per_block))

    # -- geometry ---------------------------------------------------------

    @property
    def n_scales(self) -> int:
        return len(self.blocks_per_scale)

    @property
    def n_blocks(self) -> int:
        return sum(self.blocks_per_scale)

    @property
    def spatial_ndim(self) -> int:
        return len(self.input_shape) - 1

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers

    def check_divisible(self) -> None:
        factor = 2**self.n_scales
        spatial = self.input_shape[1:]
        if any(size % factor for size in spatial):
            padded = tuple(-(-size // factor) * factor for size in spatial)
            raise ShapeError(
                f"spatial shape {spatial} is not divisible by 2**{self.n_scales}={factor}; "
                f"pad the data to {padded} when building the dataset"
            )

    def shape_at_scale(self, scale: int) -> tuple[int, ...]:
        """(C, *spatial) after ``scale + 1`` Haar layers."""
        channels, *spatial = self.input_shape
        multiplier = 2**self.spatial_ndim
        steps = scale + 1
        return (channels * multiplier**steps, *(size // 2**steps for size in spatial))

    def tissue_shape(self) -> tuple[int, ...] | None:
        return tuple(self.input_shape[1:]) if self.tissue_mode == "map" else None

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {unknown}")
        kwargs = dict(data)
        if "condition_per_block" in kwargs and isinstance(kwargs["condition_per_block"], str):
            kwargs["condition_per_block"] = parse_condition_schedule(kwargs["condition_per_block"])
        return cls(**kwargs)


@dataclass
class FlowModel:
    spec: ModelSpec
    layers: list[FlowLayer]
    normalization: FixedAffineLayer
    # spatial shape each layer's input carries, used to encode map conditions
    layer_spatial: list[tuple[int, ...]] = field(default_factory=list)

    # -- parameters ---------------------------------------------------------

    def couplings(self) -> list[CouplingBlock]:
        return [layer for layer in self.layers if isinstance(layer, CouplingBlock)]

    def permutations(self) -> list[PermutationLayer]:
        return [layer for layer in self.layers if isinstance(layer, PermutationLayer)]

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for index, block in enumerate(self.couplings()):
            params.update(block.parameters(f"block{index}."))
        return params

    def buffers(self) -> dict[str, npt.NDArray[Any]]:
        """Fixed, non-trained arrays that define the model next to its parameters."""
        arrays: dict[str, npt.NDArray[Any]] = {
            f"perm{index}": layer.perm for index, layer in enumerate(self.permutations())
        }
        arrays["norm.shift"] = self.normalization.shift
        arrays["norm.scale"] = self.normalization.scale
        return arrays

    def set_normalization(self, shift: npt.NDArray[np.float64], scale: npt.NDArray[np.float64]) -> None:
        self.normalization = FixedAffineLayer(
            shift=np.asarray(shift, dtype=np.float64).reshape(-1),
            scale=np.asarray(scale, dtype=np.float64).reshape(-1),
        )
        if self.normalization.scale.size != self.spec.input_dim:
            raise ShapeError(f"normalization has {self.normalization.scale.size} features, model {self.spec.input_dim}")

    def fit_normalization(self, *datasets: npt.NDArray[np.float64], min_scale: float = 1e-6) -> None:
        """Per-feature mean/std standardization fitted on the union of ``datasets``."""
        stacked = np.concatenate([np.asarray(d, dtype=np.float64).reshape(len(d), -1) for d in datasets])
        self.set_normalization(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), min_scale))

    # -- forward / inverse ----------------------------------------------------

    def _check_input(self, x: Tensor, cond: Condition) -> None:
        expected = (x.shape[0], *self.spec.input_shape)
        if x.shape != expected:
            raise ShapeError(f"model expects input {expected}, got {x.shape}")
        self._check_condition(x.shape[0], cond)

    def _check_condition(self, batch: int, cond: Condition) -> None:
        if cond.batch_size != batch:
            raise ShapeError(f"condition batch {cond.batch_size} != input batch {batch}")
        if cond.n_classes != self.spec.n_classes:
            raise ShapeError(f"condition has {cond.n_classes} classes, model {self.spec.n_classes}")
        want_map = self.spec.tissue_mode == "map"
        if cond.is_map != want_map or (want_map and cond.tissue.shape[1:] != self.spec.input_shape[1:]):
            raise ShapeError(
                f"model expects {self.spec.tissue_mode} tissue labels, got shape {cond.tissue.shape}"
            )

    def _cond_tensor(self, cond: Condition, layer: CouplingBlock, spatial: tuple[int, ...]) -> Tensor | None:
        features = encode_condition(cond, layer.condition, spatial)
        return None if features is None else Tensor(features)

    def normalize(self, x: Tensor) -> Tensor:
        return self.normalization.forward(x)[0]

    def encode(self, x: Tensor, cond: Condition) -> tuple[Tensor, Tensor]:
        """z = f(x, cond) flattened to (B, D), with log|det J| per sample."""
        self._check_input(x, cond)
        h, logdet = self.normalization.forward(x)
        assert logdet is not None
        for layer, spatial in zip(self.layers, self.layer_spatial):
            cond_t = self._cond_tensor(cond, layer, spatial) if isinstance(layer, CouplingBlock) else None
            h, layer_logdet = layer.forward(h, cond_t)
            if layer_logdet is not None:
                logdet = logdet + layer_logdet
        return h.reshape((h.shape[0], -1)), logdet

    def decode(self, z: Tensor, cond: Condition) -> Tensor:
        batch = z.shape[0]
        if z.ndim != 2 or z.shape[1] != self.spec.input_dim:
            raise ShapeError(f"latent must be (B, {self.spec.input_dim}), got {z.shape}")
        self._check_condition(batch, cond)
        h = z.reshape((batch, *self.spec.shape_at_scale(self.spec.n_scales - 1)))
        for layer, spatial in zip(reversed(self.layers), reversed(self.layer_spatial)):
            cond_t = self._cond_tensor(cond, layer, spatial) if isinstance(layer, CouplingBlock) else None
            h = layer.inverse(h, cond_t)
        return self.normalization.inverse(h)

    def transfer(self, x: Tensor, tissue: npt.NDArray[np.int64], source: int, target: int) -> Tensor:
        """decode(encode(x, source·tissue), target·tissue)."""
        z, _ = self.encode(x, Condition.for_domain(source, tissue, self.spec.n_classes))
        return self.decode(z, Condition.for_domain(target, tissue, self.spec.n_classes))


def build_model(spec: ModelSpec, rng: RngStream) -> FlowModel:
    """Per scale: a Haar layer, then (permutation, coupling) pairs. Untrained, the model is a pure permutation."""
    layers: list[FlowLayer] = []
    layer_spatial: list[tuple[int, ...]] = []
    tissue_shape = spec.tissue_shape()
    haar = HaarLayer(spec.spatial_ndim)
    block_index = 0
    for scale, n_blocks in enumerate(spec.blocks_per_scale):
        in_shape = spec.input_shape if scale == 0 else spec.shape_at_scale(scale - 1)
        shape = spec.shape_at_scale(scale)
        layers.append(haar)
        layer_spatial.append(tuple(in_shape[1:]))
        features = math.prod(shape)
        spatial = tuple(shape[1:])
        for _ in range(n_blocks):
            selector = spec.condition_per_block[block_index]
            block_rng = rng.child("block", block_index)
            layers.append(PermutationLayer.random(features, features // 2, block_rng.child("perm")))
            layer_spatial.append(spatial)
            cond_dim = condition_dim(selector, spec.n_classes, None if tissue_shape is None else spatial)
            layers.append(
                CouplingBlock.create(
                    features,
                    cond_dim,
                    spec.hidden,
                    block_rng.child("coupling"),
                    clamp_alpha=spec.clamp_alpha,
                    condition=selector,
                )
            )
            layer_spatial.append(spatial)
            block_index += 1
    model = FlowModel(
        spec=spec,
        layers=layers,
        normalization=FixedAffineLayer.identity(spec.input_dim),
        layer_spatial=layer_spatial,
    )
    logging.info(
        "built flow model input_shape=%s scales=%d blocks=%d parameters=%d",
        spec.input_shape,
        spec.n_scales,
        spec.n_blocks,
        sum(p.size for p in model.parameters().values()),
    )
    return model


def encode(x: Tensor, cond: Condition, model: FlowModel) -> tuple[Tensor, Tensor]:
    return model.encode(x, cond)


def decode(z: Tensor, cond: Condition, model: FlowModel) -> Tensor:
    return model.decode(z, cond)


def sample_latent(rng: RngStream, dim: int, n: int = 1) -> npt.NDArray[np.float64]:
    if dim < 1 or n < 1:
        raise ValueError(f"latent sample needs dim >= 1 and n >= 1, got dim={dim} n={n}")
    return rng.normal((n, dim))


def proxy_condition(rng: RngStream, spec: ModelSpec, batch: int, domain: int = DOMAIN_REAL) -> Condition:
    """Condition for unlabeled samples of ``domain`` with randomly drawn tissue labels."""
    tissue = sample_proxy_label(rng, spec.n_classes, batch, spec.tissue_shape())
    return Condition.for_domain(domain, tissue, spec.n_classes)
