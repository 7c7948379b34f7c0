from __future__ import annotations

import math
import unittest
from typing import Callable

import numpy as np
import numpy.typing as npt
import pytest

from autodiff.rng import RngStream
from autodiff.tensor import ShapeError, Tensor
from flows.conditions import DOMAIN_REAL, DOMAIN_SIM, Condition, condition_dim, encode_condition
from flows.layers import (
    CouplingBlock,
    FixedAffineLayer,
    HaarLayer,
    PermutationLayer,
    clamp_scale,
    haar_forward_1d,
    haar_forward_2d,
    haar_inverse_1d,
    haar_inverse_2d,
)

Array = npt.NDArray[np.float64]


def numerical_jacobian(fn: Callable[[Array], Array], x: Array, eps: float = 1e-6) -> Array:
    """Central-difference Jacobian of a flat R^d -> R^d map."""
    d = x.size
    jac = np.zeros((d, d))
    for j in range(d):
        step = np.zeros(d)
        step[j] = eps
        jac[:, j] = (fn(x + step) - fn(x - step)) / (2.0 * eps)
    return jac


def randomize_subnets(block: CouplingBlock, rng: RngStream, scale: float = 0.3) -> None:
    """Give the zero-initialized output layers non-trivial weights."""
    for index, subnet in enumerate((block.subnet_s, block.subnet_t)):
        head = subnet.layers[-1]
        head.weight.data = scale * rng.child(index, "w").normal(head.weight.shape)
        head.bias.data = scale * rng.child(index, "b").normal(head.bias.shape)


class ClampTests(unittest.TestCase):
    def test_reference_values(self) -> None:
        self.assertEqual(clamp_scale(Tensor([0.0]), 1.0).item(), 0.0)
        self.assertAlmostEqual(clamp_scale(Tensor([1.0]), 1.0).item(), 0.5, places=14)

    def test_bounded_odd_and_monotone(self) -> None:
        s = np.linspace(-1e4, 1e4, 2001)
        out = clamp_scale(Tensor(s), 2.0).numpy()
        self.assertTrue(np.all(np.abs(out) < 2.0))
        np.testing.assert_allclose(out, -out[::-1], atol=1e-15)
        self.assertTrue(np.all(np.diff(out) > 0))
        self.assertGreater(out[-1], 1.99)

    def test_non_positive_alpha_is_rejected(self) -> None:
        with self.assertRaises(ValueError):
            clamp_scale(Tensor([1.0]), 0.0)


class HaarTests(unittest.TestCase):
    def test_constant_pair_goes_to_average_channel(self) -> None:
        out = haar_forward_1d(Tensor(np.ones((1, 1, 2)))).numpy()
        np.testing.assert_allclose(out.reshape(-1), [math.sqrt(2.0), 0.0], atol=1e-15)

    def test_reference_pair(self) -> None:
        out = haar_forward_1d(Tensor([[[3.0, 1.0]]])).numpy()
        np.testing.assert_allclose(out.reshape(-1), [4.0 / math.sqrt(2.0), 2.0 / math.sqrt(2.0)], rtol=1e-15)

    def test_1d_round_trip_and_norm(self) -> None:
        x = RngStream(1).normal((100, 2, 8))
        y = haar_forward_1d(Tensor(x))
        self.assertEqual(y.shape, (100, 4, 4))
        np.testing.assert_allclose(np.linalg.norm(y.numpy().reshape(100, -1), axis=1), np.linalg.norm(x.reshape(100, -1), axis=1))
        self.assertLess(np.max(np.abs(haar_inverse_1d(y).numpy() - x)), 1e-12)

    def test_2d_reference_block(self) -> None:
        out = haar_forward_2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).numpy().reshape(-1)
        np.testing.assert_allclose(out, [5.0, -1.0, -2.0, 0.0], atol=1e-15)

    def test_2d_constant_image_has_no_detail(self) -> None:
        out = haar_forward_2d(Tensor(np.full((1, 1, 4, 4), 3.0))).numpy()
        np.testing.assert_allclose(out[:, 0], 6.0)
        np.testing.assert_allclose(out[:, 1:], 0.0, atol=1e-15)

    def test_2d_round_trip(self) -> None:
        x = RngStream(2).normal((20, 2, 8, 8))
        y = haar_forward_2d(Tensor(x))
        self.assertEqual(y.shape, (20, 8, 4, 4))
        self.assertLess(np.max(np.abs(haar_inverse_2d(y).numpy() - x)), 1e-12)

    def test_odd_length_asks_for_padding(self) -> None:
        with self.assertRaises(ShapeError) as ctx:
            haar_forward_1d(Tensor(np.zeros((1, 1, 5))))
        self.assertIn("pad", str(ctx.exception))

    def test_unit_jacobian_determinant(self) -> None:
        for layer, shape in ((HaarLayer(1), (1, 1, 4)), (HaarLayer(2), (1, 1, 2, 2))):
            def fn(flat: Array, layer: HaarLayer = layer, shape: tuple[int, ...] = shape) -> Array:
                return layer.forward(Tensor(flat.reshape(shape)))[0].numpy().reshape(-1)

            jac = numerical_jacobian(fn, RngStream(3).normal(4))
            self.assertAlmostEqual(abs(np.linalg.det(jac)), 1.0, places=6)

    def test_output_shape(self) -> None:
        self.assertEqual(HaarLayer(1).output_shape((1, 64)), (2, 32))
        self.assertEqual(HaarLayer(2).output_shape((1, 16, 16)), (4, 8, 8))


class PermutationTests(unittest.TestCase):
    def test_inverse_undoes_forward(self) -> None:
        layer = PermutationLayer.random(10, 5, RngStream(4))
        x = RngStream(5).normal((3, 10))
        y, logdet = layer.forward(Tensor(x))
        self.assertIsNone(logdet)
        np.testing.assert_array_equal(layer.inverse(y).numpy(), x)

    def test_random_permutation_crosses_the_split(self) -> None:
        for seed in range(20):
            layer = PermutationLayer.random(6, 3, RngStream(seed))
            self.assertNotEqual(set(layer.perm[:3].tolist()), {0, 1, 2})

    def test_rejects_non_permutation(self) -> None:
        with self.assertRaises(ValueError):
            PermutationLayer.from_perm(np.array([0, 0, 2]))

    def test_keeps_input_shape(self) -> None:
        layer = PermutationLayer.random(8, 4, RngStream(6))
        y, _ = layer.forward(Tensor(np.zeros((2, 2, 4))))
        self.assertEqual(y.shape, (2, 2, 4))


class FixedAffineTests(unittest.TestCase):
    def test_log_det_matches_jacobian(self) -> None:
        layer = FixedAffineLayer(shift=np.array([1.0, -2.0, 0.5]), scale=np.array([2.0, 0.5, 4.0]))
        y, logdet = layer.forward(Tensor(np.ones((2, 3))))
        assert logdet is not None
        np.testing.assert_allclose(logdet.numpy(), [-math.log(4.0)] * 2)
        np.testing.assert_allclose(layer.inverse(y).numpy(), np.ones((2, 3)))

    def test_rejects_non_positive_scale(self) -> None:
        with self.assertRaises(ValueError):
            FixedAffineLayer(shift=np.zeros(2), scale=np.array([1.0, 0.0]))


def test_untrained_coupling_is_identity() -> None:
    block = CouplingBlock.create(6, 0, (8,), RngStream(7), condition="None")
    x = RngStream(8).normal((4, 6))
    y, logdet = block.forward(Tensor(x))
    np.testing.assert_array_equal(y.numpy(), x)
    np.testing.assert_array_equal(logdet.numpy(), np.zeros(4))


def test_constant_scale_doubles_second_half() -> None:
    alpha = 1.0
    block = CouplingBlock.create(6, 0, (8,), RngStream(9), clamp_alpha=alpha, condition="None")
    # raw output whose soft clamp is exactly ln 2
    raw = alpha * math.tan(math.log(2.0) * math.pi / (2.0 * alpha))
    block.subnet_s.layers[-1].bias.data = np.full(3, raw)
    x = RngStream(10).normal((5, 6))
    y, logdet = block.forward(Tensor(x))
    np.testing.assert_allclose(y.numpy()[:, :3], x[:, :3], rtol=0, atol=0)
    np.testing.assert_allclose(y.numpy()[:, 3:], 2.0 * x[:, 3:], rtol=1e-12)
    np.testing.assert_allclose(logdet.numpy(), np.full(5, 3.0 * math.log(2.0)), rtol=1e-12)


def test_coupling_log_det_matches_numerical_jacobian() -> None:
    block = CouplingBlock.create(4, 0, (16,), RngStream(11), condition="None")
    randomize_subnets(block, RngStream(12), scale=0.8)
    for trial in range(5):
        x = RngStream(13).child(trial).normal(4)
        _, logdet = block.forward(Tensor(x[None, :]))

        def fn(flat: Array) -> Array:
            return block.forward(Tensor(flat[None, :]))[0].numpy()[0]

        det = abs(np.linalg.det(numerical_jacobian(fn, x)))
        assert math.exp(logdet.item()) == pytest.approx(det, rel=1e-6)


def test_conditioned_coupling_round_trip() -> None:
    n_classes = 3
    cond_dim = condition_dim("DY", n_classes, None)
    block = CouplingBlock.create(8, cond_dim, (32, 32), RngStream(14), condition="DY")
    randomize_subnets(block, RngStream(15))
    rng = RngStream(16)
    x = rng.child("x").normal((1000, 8)) * 3.0
    tissue = rng.child("tissue").integers(0, n_classes, 1000)
    domains = rng.child("domain").integers(0, 2, 1000)
    cond = Condition(domain=domains, tissue=tissue, n_classes=n_classes)
    cond_t = Tensor(encode_condition(cond, "DY", ()))

    y, _ = block.forward(Tensor(x), cond_t)
    assert np.max(np.abs(y.numpy() - x)) > 1e-3
    assert np.max(np.abs(block.inverse(y, cond_t).numpy() - x)) < 1e-9


def test_condition_changes_the_output() -> None:
    cond_dim = condition_dim("D", 1, None)
    block = CouplingBlock.create(4, cond_dim, (8,), RngStream(17), condition="D")
    randomize_subnets(block, RngStream(18))
    x = Tensor(RngStream(19).normal((2, 4)))
    tissue = np.zeros(2, dtype=np.int64)
    sim = Tensor(encode_condition(Condition.for_domain(DOMAIN_SIM, tissue, 1), "D", ()))
    real = Tensor(encode_condition(Condition.for_domain(DOMAIN_REAL, tissue, 1), "D", ()))
    assert not np.allclose(block.forward(x, sim)[0].numpy(), block.forward(x, real)[0].numpy())


def test_condition_width_mismatch_raises() -> None:
    block = CouplingBlock.create(4, 5, (8,), RngStream(20), condition="DY")
    with pytest.raises(ShapeError):
        block.forward(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
    with pytest.raises(ShapeError):
        block.forward(Tensor(np.zeros((2, 4))), None)


def test_coupling_needs_two_features() -> None:
    with pytest.raises(ValueError):
        CouplingBlock.create(1, 0, (4,), RngStream(21), condition="None")


if __name__ == "__main__":
    unittest.main()
