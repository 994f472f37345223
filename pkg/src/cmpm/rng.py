"""Seeded xoshiro256** streams with SplitMix64 seeding.

Every generator draw in the package goes through :class:`StreamBank` so that
outputs depend only on ``(seed, stream key)`` and never on how many cells are
generated together or in which order.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix a root seed with integer keys into a 64-bit sub-seed."""
    h = seed & MASK64
    for key in keys:
        _, k = splitmix64((key * _GOLDEN) & MASK64)
        _, h = splitmix64(h ^ k)
    return h


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class StreamBank:
    """A bank of independent xoshiro256** streams advanced in lockstep.

    Each stream is seeded from one 64-bit value; the four state words are the
    first four SplitMix64 outputs of that seed. ``next_u64`` returns one word
    per stream, so stream ``i`` of a bank produces exactly the same sequence as
    a bank holding only that stream.
    """

    def __init__(self, seeds):
        # no numpy round trip: a list mixing ints above and below 2**63 becomes float64
        seeds = [int(seeds) & MASK64] if np.isscalar(seeds) else [int(s) & MASK64 for s in seeds]
        state = np.empty((4, len(seeds)), dtype=np.uint64)
        for j, s in enumerate(seeds):
            for w in range(4):
                s, out = splitmix64(s)
                state[w, j] = out
        self._s = state

    @classmethod
    def from_state(cls, words) -> "StreamBank":
        """Single stream with its four state words set directly."""
        bank = cls([0])
        bank._s = np.array(words, dtype=np.uint64).reshape(4, 1)
        return bank

    @property
    def n_streams(self) -> int:
        return self._s.shape[1]

    def next_u64(self) -> np.ndarray:
        s = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
            t = s[1] << np.uint64(17)
            s[2] ^= s[0]
            s[3] ^= s[1]
            s[1] ^= s[2]
            s[0] ^= s[3]
            s[2] ^= t
            s[3] = _rotl(s[3], 45)
        return result

    def random(self, shape=()) -> np.ndarray:
        """Uniforms in the open interval (0, 1), shape ``(n_streams, *shape)``.

        Values are filled in C order, one word per element per stream.
        """
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        count = int(np.prod(shape)) if shape else 1
        out = np.empty((count, self.n_streams))
        for i in range(count):
            out[i] = ((self.next_u64() >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return out.T.reshape((self.n_streams, *shape))

    # Inversion samplers: each consumes exactly one word per value, which keeps
    # the streams' positions independent of the drawn values.
    def normal(self, loc=0.0, scale=1.0, shape=()) -> np.ndarray:
        return loc + scale * special.ndtri(self.random(shape))

    def poisson(self, lam, shape=()) -> np.ndarray:
        u = self.random(shape)
        lam = np.broadcast_to(lam, u.shape)
        return poisson_inverse(u, lam)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        u = self.random(shape)
        return np.minimum(low + np.floor(u * (high - low)), high - 1).astype(np.int64)


def poisson_inverse(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Poisson quantile function, evaluated element-wise."""
    return stats.poisson.ppf(u, lam).astype(np.int64)
