"""Seeded, platform-stable random generation.

The generator is PCG64 (numpy's permuted congruential generator).  Its raw
64-bit stream is specified by the PCG paper and is bit-identical across
platforms for a given seed, which is what every determinism contract in
this library leans on.  Gaussian draws deliberately avoid numpy's ziggurat
sampler and use the Box-Muller transform on the uniform stream instead, so
the normal stream is pinned by this module rather than by numpy internals.
"""

from __future__ import annotations

import numpy as np

_M64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically mix ``seed`` with integer keys into a fresh seed.

    Used wherever a sub-stream is needed (per-epoch shuffles, per-subject
    phantoms) so that streams never overlap and never depend on call order.
    """
    s = _splitmix64(seed & _M64)
    for k in keys:
        s = _splitmix64((s ^ (int(k) & _M64)) & _M64)
    return s


class Rng:
    """Seeded random source; same seed gives the same stream everywhere."""

    ALGORITHM = "pcg64+box-muller"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, size, dtype=np.float64) -> np.ndarray:
        """Uniform draws in [low, high) from the PCG64 double stream."""
        u = self._gen.random(size=size, dtype=np.float64)
        return (low + (high - low) * u).astype(dtype, copy=False)

    def normal(self, size, sigma: float = 1.0, dtype=np.float64) -> np.ndarray:
        """Standard-normal draws of the given shape via Box-Muller.

        Consumes 2*ceil(n/2) uniforms per n samples; the pairing is fixed,
        so the output bytes are a pure function of the seed.
        """
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # in (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = (sigma * z).astype(dtype, copy=False)
        return out.reshape(size) if not np.isscalar(size) else out.reshape((n,))

    def integer(self, low: int, high: int) -> int:
        """One integer in [low, high), via numpy's bounded-draw (Lemire)."""
        return int(self._gen.integers(low, high))

    def choice_no_replace(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from range(n)."""
        return self._gen.choice(n, size=size, replace=False)

    def shuffled_indices(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def spawn(self, *keys: int) -> "Rng":
        """Independent generator derived from this seed and the keys."""
        return Rng(derive_seed(self.seed, *keys))
