from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Final

import numpy as np
import numpy.typing as npt

_SEED_MASK: Final[int] = (1 << 64) - 1
# Draw index lives in the top 64-bit word of the 256-bit Philox counter, so
# consecutive draws never overlap as long as a single draw stays below 2**192 blocks.
_COUNTER_SHIFT: Final[int] = 192


@dataclass
class RngStream:
    """Counter-based random stream (Philox) with named, splittable children.

    Every draw uses a fresh generator keyed by ``seed`` at position ``counter``
    and then advances the counter, so ``(seed, counter)`` fully determines the
    next draw on every platform.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _SEED_MASK
        if self.counter < 0:
            raise ValueError(f"counter must be non-negative, got {self.counter}")

    def _generator(self) -> np.random.Generator:
        bit_gen = np.random.Philox(key=self.seed, counter=self.counter << _COUNTER_SHIFT)
        self.counter += 1
        return np.random.Generator(bit_gen)

    def child(self, *names: str | int) -> RngStream:
        """Independent stream derived from this stream's seed and a name path."""
        path = "/".join(str(name) for name in names)
        digest = hashlib.sha256(f"{self.seed}/{path}".encode("utf-8")).digest()
        return RngStream(seed=int.from_bytes(digest[:8], "little"))

    def normal(self, shape: tuple[int, ...] | int) -> npt.NDArray[np.float64]:
        return self._generator().standard_normal(shape)

    def uniform(self, low: float, high: float, shape: tuple[int, ...] | int) -> npt.NDArray[np.float64]:
        return self._generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int) -> npt.NDArray[np.int64]:
        return self._generator().integers(low, high, shape, dtype=np.int64)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._generator().permutation(n).astype(np.int64)
