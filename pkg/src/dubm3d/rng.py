"""Counter-based SplitMix64 generator shared by every random draw in the package.

The generator state is a single 64-bit counter.  Output ``i`` of a stream
seeded with ``s`` is ``mix(s + (i + 1) * GOLDEN)``, so blocks of draws can be
produced with vectorised uint64 arithmetic and the sequence is identical on
every platform.

Constants (Steele, Lea & Flood, SplitMix64):

    GOLDEN = 0x9E3779B97F4A7C15
    MIX1   = 0xBF58476D1CE4E5B9
    MIX2   = 0x94D049BB133111EB
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a sub-stream, e.g. ``derive_seed(seed, image_index, photons)``."""
    state = int(seed) & _MASK
    for key in keys:
        rng = SplitMix64(state ^ (int(key) & _MASK))
        state = int(rng.next_u64(1)[0])
    return state


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(GOLDEN)) & _MASK
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def uniform_range(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.uniform(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals by Box-Muller (one pair of uniforms per output)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2, n))
        u1 = 1.0 - u[0]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high); float-scaled, bias below 2**-40 for realistic ``high``."""
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def poisson(self, lam) -> np.ndarray:
        """Poisson counts: CDF inversion below ``POISSON_SWITCH``, rounded Gaussian above."""
        lam = np.asarray(lam, dtype=np.float64)
        shape = lam.shape
        flat = lam.ravel()
        out = np.zeros(flat.shape, dtype=np.int64)
        u = self.uniform(flat.shape)
        z = self.normal(flat.shape)

        small = flat < POISSON_SWITCH
        if small.any():
            out[small] = _poisson_inversion(flat[small], u[small])
        big = ~small
        if big.any():
            lb = flat[big]
            out[big] = np.maximum(np.rint(lb + np.sqrt(lb) * z[big]), 0).astype(np.int64)
        return out.reshape(shape)


POISSON_SWITCH = 30.0


def _poisson_inversion(lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    k = np.zeros(lam.shape, dtype=np.int64)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    # lam < 30 puts the 1 - 1e-16 quantile well below 200
    for step in range(1, 200):
        if not active.any():
            break
        p = np.where(active, p * lam / step, p)
        k += active
        cdf = np.where(active, cdf + p, cdf)
        active &= u > cdf
    return k
