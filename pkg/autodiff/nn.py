from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from autodiff.rng import RngStream
from autodiff.tensor import Tensor, dropout


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, in_features: int, out_features: int, rng: RngStream, *, zero: bool = False) -> Linear:
        if zero:
            weight = np.zeros((in_features, out_features))
            bias = np.zeros(out_features)
        else:
            bound = 1.0 / math.sqrt(max(in_features, 1))
            weight = rng.uniform(-bound, bound, (in_features, out_features))
            bias = rng.uniform(-bound, bound, out_features)
        return cls(weight=Tensor(weight, requires_grad=True), bias=Tensor(bias, requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class MLP:
    """Fully connected stack: hidden layers with an activation, then a linear head."""

    layers: list[Linear]
    activation: str = "relu"
    slope: float = 0.2
    dropout_p: float = 0.0

    @classmethod
    def create(
        cls,
        in_features: int,
        hidden: tuple[int, ...],
        out_features: int,
        rng: RngStream,
        *,
        activation: str = "relu",
        slope: float = 0.2,
        dropout_p: float = 0.0,
        zero_final: bool = False,
    ) -> MLP:
        if activation not in {"relu", "leaky_relu"}:
            raise ValueError(f"unknown activation {activation!r}")
        sizes = (in_features, *hidden)
        layers = [Linear.create(a, b, rng.child("layer", i)) for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        layers.append(Linear.create(sizes[-1], out_features, rng.child("layer", len(hidden)), zero=zero_final))
        return cls(layers=layers, activation=activation, slope=slope, dropout_p=dropout_p)

    def __call__(self, x: Tensor, *, train: bool = False, rng: RngStream | None = None) -> Tensor:
        h = x
        for index, layer in enumerate(self.layers[:-1]):
            h = layer(h)
            h = h.relu() if self.activation == "relu" else h.leaky_relu(self.slope)
            if self.dropout_p > 0.0:
                h = dropout(h, self.dropout_p, train=train, rng=None if rng is None else rng.child("dropout", index))
        return self.layers[-1](h)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for index, layer in enumerate(self.layers):
            params[f"{prefix}layer{index}.weight"] = layer.weight
            params[f"{prefix}layer{index}.bias"] = layer.bias
        return params
