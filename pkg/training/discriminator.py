from __future__ import annotations

from dataclasses import dataclass

from autodiff.nn import MLP
from autodiff.rng import RngStream
from autodiff.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DiscriminatorSpec:
    hidden_width: int = 256
    hidden_layers: int = 3
    slope: float = 0.2
    dropout_p: float = 0.2

    def __post_init__(self) -> None:
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise ValueError("discriminator needs at least one hidden layer of width >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout_p}")


@dataclass
class Discriminator:
    """Unconditional scorer: flattened sample -> one real-valued score."""

    input_dim: int
    mlp: MLP

    @classmethod
    def create(
        cls, input_dim: int, spec: DiscriminatorSpec, rng: RngStream, *, zero_output: bool = False
    ) -> Discriminator:
        mlp = MLP.create(
            input_dim,
            (spec.hidden_width,) * spec.hidden_layers,
            1,
            rng,
            activation="leaky_relu",
            slope=spec.slope,
            dropout_p=spec.dropout_p,
            zero_final=zero_output,
        )
        return cls(input_dim=input_dim, mlp=mlp)

    def __call__(self, x: Tensor, *, train: bool = False, rng: RngStream | None = None) -> Tensor:
        flat = x.reshape((x.shape[0], -1))
        if flat.shape[1] != self.input_dim:
            raise ShapeError(f"discriminator expects {self.input_dim} features, got {flat.shape[1]}")
        return self.mlp(flat, train=train, rng=rng).reshape((x.shape[0],))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return self.mlp.parameters(prefix)
