import tempfile
import unittest
from pathlib import Path

import numpy as np

from autodiff.rng import RngStream
from autodiff.tensor import Tensor
from flows.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_flow_arrays,
    model_checkpoint,
    restore_model,
    save_checkpoint,
)
from flows.conditions import DOMAIN_REAL, Condition
from flows.model import FlowModel, ModelSpec, build_model
from tests.test_model import randomized_model


class CheckpointTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        self.path = Path(self.tmpdir.name) / "model.cinn"
        self.spec = ModelSpec(
            input_shape=(1, 8), blocks_per_scale=(1, 1), condition_per_block=("DY", "None"), n_classes=3, hidden_width=8
        )
        self.model = randomized_model(self.spec, 1)
        self.model.fit_normalization(RngStream(2).normal((30, 1, 8)) + 5.0)

    def _encode(self, model: FlowModel) -> np.ndarray:
        x = RngStream(3).normal((100, 1, 8))
        cond = Condition.for_domain(DOMAIN_REAL, RngStream(4).integers(0, 3, 100), 3)
        z, _ = model.encode(Tensor(x), cond)
        return z.numpy()

    def test_round_trip_is_bit_identical(self) -> None:
        save_checkpoint(self.path, model_checkpoint(self.model, {"epoch": 7}))
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.metadata, {"epoch": 7})
        self.assertEqual(loaded.model_spec(), self.spec)
        np.testing.assert_array_equal(self._encode(restore_model(loaded)), self._encode(self.model))

    def test_saving_twice_gives_identical_bytes(self) -> None:
        other = self.path.with_name("copy.cinn")
        save_checkpoint(self.path, model_checkpoint(self.model))
        save_checkpoint(other, model_checkpoint(self.model))
        self.assertEqual(self.path.read_bytes(), other.read_bytes())
        self.assertTrue(self.path.read_bytes().startswith(MAGIC))

    def test_flipped_byte_fails_the_checksum(self) -> None:
        save_checkpoint(self.path, model_checkpoint(self.model))
        blob = bytearray(self.path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        self.path.write_bytes(bytes(blob))
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.path)
        self.assertIn("checksum", str(ctx.exception))

    def test_wrong_magic_is_rejected(self) -> None:
        self.path.write_bytes(b"NOTACHECKPOINT" * 4)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_missing_file_is_a_checkpoint_error(self) -> None:
        with self.assertRaises(CheckpointError):
            load_checkpoint(Path(self.tmpdir.name) / "absent.cinn")

    def test_mismatched_model_is_rejected(self) -> None:
        save_checkpoint(self.path, model_checkpoint(self.model))
        wider = build_model(
            ModelSpec(
                input_shape=(1, 8), blocks_per_scale=(1, 1), condition_per_block=("DY", "None"), n_classes=3, hidden_width=16
            ),
            RngStream(0),
        )
        with self.assertRaises(CheckpointError):
            load_flow_arrays(wider, load_checkpoint(self.path).section("flow."))

    def test_float32_export_is_close(self) -> None:
        save_checkpoint(self.path, model_checkpoint(self.model), float_dtype="float32")
        restored = restore_model(load_checkpoint(self.path))
        np.testing.assert_allclose(self._encode(restored), self._encode(self.model), rtol=1e-5, atol=1e-5)

    def test_integer_arrays_survive(self) -> None:
        ckpt = Checkpoint(spec=self.spec.to_dict(), arrays={"counts": np.array([3, 1, 4], dtype=np.int64)})
        save_checkpoint(self.path, ckpt)
        counts = load_checkpoint(self.path).arrays["counts"]
        self.assertEqual(counts.dtype, np.int64)
        np.testing.assert_array_equal(counts, [3, 1, 4])


if __name__ == "__main__":
    unittest.main()
