"""Maximum-likelihood and least-squares adversarial objectives."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from autodiff.rng import RngStream
from autodiff.tensor import NonFiniteError, ShapeError, Tensor
from flows.conditions import DOMAIN_REAL, DOMAIN_SIM, Condition
from flows.model import FlowModel
from training.discriminator import Discriminator


class LossTermError(NonFiniteError):
    """A loss term hit a non-finite value; ``term`` names it."""

    def __init__(self, term: str, detail: str) -> None:
        super().__init__(f"{term}: {detail}")
        self.term = term


@contextmanager
def _term(name: str) -> Iterator[None]:
    try:
        yield
    except LossTermError:
        raise
    except NonFiniteError as exc:
        raise LossTermError(name, str(exc)) from exc


@dataclass(frozen=True)
class LossWeights:
    ml_real: float = 1.0
    ml_sim: float = 1.0
    gen_real: float = 1.0
    gen_sim: float = 1.0

    def __post_init__(self) -> None:
        values = (self.ml_real, self.ml_sim, self.gen_real, self.gen_sim)
        if not all(np.isfinite(v) and v >= 0.0 for v in values):
            raise ValueError(f"loss weights must be finite and non-negative, got {values}")


@dataclass
class Batch:
    x: Tensor
    cond: Condition

    def __post_init__(self) -> None:
        if self.x.shape[0] == 0:
            raise ShapeError("empty batch")
        if self.cond.batch_size != self.x.shape[0]:
            raise ShapeError(f"batch of {self.x.shape[0]} samples has {self.cond.batch_size} conditions")


@dataclass
class LossTerms:
    ml_real: Tensor
    ml_sim: Tensor
    gen_real: Tensor
    gen_sim: Tensor
    gen_total: Tensor
    dis_real: Tensor
    dis_sim: Tensor
    dis_total: Tensor

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in self.__dataclass_fields__}


def ml_loss(z: Tensor, logdet: Tensor) -> Tensor:
    """mean_i(||z_i||^2 / 2 - logdet_i)."""
    if z.ndim != 2 or logdet.shape != (z.shape[0],):
        raise ShapeError(f"ml_loss expects z (B, D) and logdet (B,), got {z.shape} and {logdet.shape}")
    if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(logdet.data))):
        raise NonFiniteError("ml_loss received non-finite input")
    return (z.square().sum(axis=1) * 0.5 - logdet).mean()


def gen_loss(scores_fake: Tensor) -> Tensor:
    return (scores_fake - 1.0).square().mean()


def dis_loss(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    return (scores_real - 1.0).square().mean() + scores_fake.square().mean()


def total_losses(
    batch_sim: Batch,
    batch_real: Batch,
    model: FlowModel,
    dis_sim: Discriminator,
    dis_real: Discriminator,
    *,
    weights: LossWeights = LossWeights(),
    rng: RngStream | None = None,
    train: bool = False,
) -> LossTerms:
    """All generator and discriminator terms from a single flow pass.

    ``batch_real`` carries proxy tissue labels. Fakes are T_sim->real of the
    simulated batch and T_real->sim of the real batch; they enter the
    discriminator terms detached, so ``dis_total`` never reaches the flow.
    """
    if batch_sim.cond.domain.any() or not batch_real.cond.domain.all():
        raise ValueError("batch_sim must be tagged sim and batch_real tagged real")
    streams = rng if rng is not None else RngStream(0)

    with _term("ml_sim"):
        z_sim, logdet_sim = model.encode(batch_sim.x, batch_sim.cond)
        ml_sim = ml_loss(z_sim, logdet_sim)
    with _term("ml_real"):
        z_real, logdet_real = model.encode(batch_real.x, batch_real.cond)
        ml_real = ml_loss(z_real, logdet_real)

    with _term("gen_real"):
        fake_real = model.normalize(model.decode(z_sim, batch_sim.cond.with_domain(DOMAIN_REAL)))
        gen_real = gen_loss(dis_real(fake_real, train=train, rng=streams.child("dis_real", "gen")))
    with _term("gen_sim"):
        fake_sim = model.normalize(model.decode(z_real, batch_real.cond.with_domain(DOMAIN_SIM)))
        gen_sim = gen_loss(dis_sim(fake_sim, train=train, rng=streams.child("dis_sim", "gen")))

    with _term("gen_total"):
        gen_total = (
            ml_real * weights.ml_real
            + ml_sim * weights.ml_sim
            + gen_real * weights.gen_real
            + gen_sim * weights.gen_sim
        )

    with _term("dis_real"):
        dis_real_loss = dis_loss(
            dis_real(model.normalize(batch_real.x), train=train, rng=streams.child("dis_real", "real")),
            dis_real(fake_real.detach(), train=train, rng=streams.child("dis_real", "fake")),
        )
    with _term("dis_sim"):
        dis_sim_loss = dis_loss(
            dis_sim(model.normalize(batch_sim.x), train=train, rng=streams.child("dis_sim", "real")),
            dis_sim(fake_sim.detach(), train=train, rng=streams.child("dis_sim", "fake")),
        )

    with _term("dis_total"):
        dis_total = dis_real_loss + dis_sim_loss

    return LossTerms(
        ml_real=ml_real,
        ml_sim=ml_sim,
        gen_real=gen_real,
        gen_sim=gen_sim,
        gen_total=gen_total,
        dis_real=dis_real_loss,
        dis_sim=dis_sim_loss,
        dis_total=dis_total,
    )
