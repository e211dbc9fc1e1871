"""Seeded counter-based random number generator.

All sampling, splitting, augmentation and weight initialization in this
package draws from the SplitMix64 generator below instead of a
platform-dependent RNG, so every pipeline stage is reproducible from a
64-bit seed across implementations. The update rule (documented here and
in the README format notes):

    state   <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z       <- state
    z       <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2^64
    z       <- (z XOR (z >> 27)) * 0x94D049BB133111EB   mod 2^64
    output  <- z XOR (z >> 31)

Floats in [0, 1) take the top 53 bits of the output.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """Counter-based 64-bit generator with a splitmix update."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias (rejection)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            v = self.next_u64()
            if v <= limit:
                return v % n

    def normal(self) -> float:
        """Standard normal via Box-Muller (two uniforms per pair)."""
        if hasattr(self, "_spare"):
            spare = self._spare
            del self._spare
            return spare
        u1 = self.random()
        while u1 <= 1e-300:
            u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choose(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), uniform without replacement."""
        if k > n:
            raise ValueError(f"cannot choose {k} from {n}")
        idx = list(range(n))
        self.shuffle(idx)
        return idx[:k]

    def _next_u64_block(self, count: int) -> "np.ndarray":
        """Vectorized draw of ``count`` outputs, bit-identical to the scalar loop.

        The counter update is an affine step, so output i depends only on
        state + (i+1)*gamma; a block is computable in one shot and the
        state advances as if next_u64 had been called ``count`` times.
        """
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self._state) + np.uint64(_GAMMA) * steps
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + count * _GAMMA) & _MASK64
        return z

    def _random_block(self, count: int) -> "np.ndarray":
        return (self._next_u64_block(count) >> np.uint64(11)) * (1.0 / (1 << 53))

    def uniform_array(self, shape, low: float, high: float) -> "np.ndarray":
        """Uniform ndarray; element i equals the i-th scalar uniform() draw."""
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out = low + (high - low) * self._random_block(count)
        return out.reshape(shape)

    def normal_array(self, shape, mean: float = 0.0, sigma: float = 1.0) -> "np.ndarray":
        """Gaussian ndarray via Box-Muller, two uniforms per element.

        This stream is its own contract: it does not share the scalar
        normal()'s spare-value cache (each element uses the cosine branch
        of a fresh pair), so mixing scalar and array draws stays
        well-defined.
        """
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u1 = self._random_block(count)
        u2 = self._random_block(count)
        u1 = np.maximum(u1, 1e-300)
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (mean + sigma * out).reshape(shape)
