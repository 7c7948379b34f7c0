from __future__ import annotations

import unittest

import numpy as np
import pytest
from _pytest.monkeypatch import MonkeyPatch

from autodiff.gradcheck import grad_check_parameters
from autodiff.rng import RngStream
from autodiff.tensor import Graph, ShapeError, Tensor
from flows.conditions import DOMAIN_REAL, DOMAIN_SIM, Condition
from flows.model import ModelSpec
from tests.test_model import randomized_model
from training.discriminator import Discriminator, DiscriminatorSpec
from training.losses import (
    Batch,
    LossTermError,
    LossTerms,
    LossWeights,
    dis_loss,
    gen_loss,
    ml_loss,
    total_losses,
)
from training.optim import Adam, AdamState, OptimizerConfig, adam_step


class LossValueTests(unittest.TestCase):
    def test_ml_loss_hand_value(self) -> None:
        loss = ml_loss(Tensor([[1.0, 2.0]]), Tensor([0.5]))
        self.assertAlmostEqual(loss.item(), 2.0, places=14)

    def test_ml_loss_shape_check(self) -> None:
        with self.assertRaises(ShapeError):
            ml_loss(Tensor([[1.0, 2.0]]), Tensor([0.5, 0.5]))

    def test_least_squares_terms(self) -> None:
        self.assertAlmostEqual(gen_loss(Tensor([1.0, 0.0])).item(), 0.5)
        self.assertEqual(dis_loss(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item(), 0.0)
        self.assertAlmostEqual(dis_loss(Tensor([0.0]), Tensor([1.0])).item(), 2.0)

    def test_negative_weight_is_rejected(self) -> None:
        with self.assertRaises(ValueError):
            LossWeights(gen_sim=-1.0)


SPEC = ModelSpec(
    input_shape=(1, 4),
    blocks_per_scale=(2,),
    condition_per_block=("DY", "None"),
    n_classes=2,
    hidden_layers=1,
    hidden_width=4,
)
DIS_SPEC = DiscriminatorSpec(hidden_width=4, hidden_layers=1, dropout_p=0.2)


class TotalLossTests(unittest.TestCase):
    def setUp(self) -> None:
        self.model = randomized_model(SPEC, 1, scale=0.5)
        rng = RngStream(2)
        self.dis_sim = Discriminator.create(4, DIS_SPEC, rng.child("sim"))
        self.dis_real = Discriminator.create(4, DIS_SPEC, rng.child("real"))
        self.batch_sim = Batch(
            Tensor(rng.child("x_sim").normal((3, 1, 4))),
            Condition.for_domain(DOMAIN_SIM, np.array([0, 1, 1]), 2),
        )
        self.batch_real = Batch(
            Tensor(rng.child("x_real").normal((3, 1, 4)) + 0.5),
            Condition.for_domain(DOMAIN_REAL, np.array([1, 0, 1]), 2),
        )
        self.flow_params = list(self.model.parameters().values())
        self.dis_params = list(self.dis_sim.parameters().values()) + list(self.dis_real.parameters().values())

    def _terms(self) -> LossTerms:
        return total_losses(
            self.batch_sim,
            self.batch_real,
            self.model,
            self.dis_sim,
            self.dis_real,
            rng=RngStream(5),
            train=True,
        )

    def test_all_terms_are_finite_scalars(self) -> None:
        values = self._terms().values()
        self.assertEqual(len(values), 8)
        self.assertTrue(all(np.isfinite(v) for v in values.values()))

    def test_totals_are_weighted_sums(self) -> None:
        values = self._terms().values()
        self.assertAlmostEqual(
            values["gen_total"], values["ml_real"] + values["ml_sim"] + values["gen_real"] + values["gen_sim"], places=12
        )
        self.assertAlmostEqual(values["dis_total"], values["dis_real"] + values["dis_sim"], places=12)

    def test_generator_terms_match_finite_differences(self) -> None:
        params = self.flow_params + self.dis_params
        for name in ("ml_sim", "ml_real", "gen_real", "gen_sim", "gen_total"):
            error = grad_check_parameters(lambda name=name: getattr(self._terms(), name), params, eps=1e-7)
            self.assertLess(error, 1e-5, name)

    def test_discriminator_terms_match_finite_differences(self) -> None:
        for name in ("dis_real", "dis_sim", "dis_total"):
            error = grad_check_parameters(lambda name=name: getattr(self._terms(), name), self.dis_params, eps=1e-7)
            self.assertLess(error, 1e-5, name)

    def test_discriminator_loss_does_not_reach_the_flow(self) -> None:
        with Graph() as graph:
            terms = self._terms()
        graph.backward(terms.dis_total)
        self.assertTrue(all(p.grad is None for p in self.flow_params))
        self.assertTrue(any(p.grad is not None for p in self.dis_params))

    def test_domain_tags_are_checked(self) -> None:
        with self.assertRaises(ValueError):
            total_losses(self.batch_real, self.batch_sim, self.model, self.dis_sim, self.dis_real)

    def test_overflowing_total_is_reported_as_gen_total(self) -> None:
        huge = LossWeights(ml_real=1.7e308, ml_sim=1.7e308, gen_real=1.7e308, gen_sim=1.7e308)
        with np.errstate(over="ignore"), self.assertRaises(LossTermError) as ctx:
            total_losses(self.batch_sim, self.batch_real, self.model, self.dis_sim, self.dis_real, weights=huge)
        self.assertEqual(ctx.exception.term, "gen_total")

    def test_every_discriminator_pass_draws_its_own_dropout_mask(self) -> None:
        seeds: list[int] = []
        original = Discriminator.__call__

        def recording(dis: Discriminator, x: Tensor, *, train: bool = False, rng: RngStream | None = None) -> Tensor:
            assert rng is not None
            seeds.append(rng.seed)
            return original(dis, x, train=train, rng=rng)

        with MonkeyPatch.context() as mp:
            mp.setattr(Discriminator, "__call__", recording)
            self._terms()
        self.assertEqual(len(seeds), 6)
        self.assertEqual(len(set(seeds)), 6)


def test_empty_batch_is_rejected() -> None:
    with pytest.raises(ValueError):
        Batch(Tensor(np.zeros((0, 1, 4))), Condition.for_domain(DOMAIN_SIM, np.zeros(0, dtype=np.int64), 2))


def test_discriminator_output_and_width_check() -> None:
    dis = Discriminator.create(6, DiscriminatorSpec(hidden_width=8, hidden_layers=2), RngStream(6))
    x = Tensor(RngStream(7).normal((5, 1, 6)))
    scores = dis(x)
    assert scores.shape == (5,)
    np.testing.assert_array_equal(dis(x).numpy(), scores.numpy())
    with pytest.raises(ShapeError):
        dis(Tensor(np.zeros((5, 4))))


def test_adam_degenerate_case_is_sign_descent() -> None:
    param = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState(OptimizerConfig(lr=0.1, beta1=0.0, beta2=0.0, weight_decay=0.0, eps=1e-12))
    adam_step({"p": param}, {"p": np.array([3.0, -0.5])}, state)
    np.testing.assert_allclose(param.numpy(), [0.9, -1.9], rtol=1e-10)


def test_adam_first_step_is_bias_corrected() -> None:
    param = Tensor([1.0], requires_grad=True)
    state = AdamState(OptimizerConfig(lr=0.01, weight_decay=0.0))
    adam_step({"p": param}, {"p": np.array([1e-3])}, state)
    assert param.item() == pytest.approx(0.99, rel=1e-6)
    assert state.step == 1


def test_adam_missing_gradient_counts_as_zero() -> None:
    param = Tensor([1.0], requires_grad=True)
    adam_step({"p": param}, {"p": None}, AdamState(OptimizerConfig(lr=0.1, weight_decay=0.0)))
    assert param.item() == 1.0


def test_adam_minimizes_a_quadratic() -> None:
    param = Tensor([3.0, -4.0], requires_grad=True)
    opt = Adam({"p": param}, OptimizerConfig(lr=0.05, weight_decay=0.0))
    for _ in range(500):
        opt.zero_grad()
        with Graph() as graph:
            loss = param.square().sum()
        graph.backward(loss)
        opt.step()
    assert np.max(np.abs(param.numpy())) < 0.25


def test_adam_state_arrays_round_trip() -> None:
    config = OptimizerConfig()
    param = Tensor([1.0, 2.0], requires_grad=True)
    state = AdamState(config)
    adam_step({"w": param}, {"w": np.array([0.1, -0.2])}, state)
    restored = AdamState.from_arrays(config, {k[len("opt."):]: v for k, v in state.arrays("opt.").items()})
    assert restored.step == 1
    np.testing.assert_array_equal(restored.m["w"], state.m["w"])
    np.testing.assert_array_equal(restored.v["w"], state.v["w"])


def test_optimizer_config_validation() -> None:
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)


if __name__ == "__main__":
    unittest.main()
