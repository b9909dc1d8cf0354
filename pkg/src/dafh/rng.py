"""Portable seeded random stream.

Everything random in the package draws from :class:`Stream`, which reads raw
64-bit words from numpy's PCG64 bit generator and converts them itself.
PCG64's raw output is stable across numpy versions and platforms, so the
conversions below (53-bit uniforms, top-bit signs, Box-Muller normals) are
bit-reproducible.
"""

import numpy as np

_TWO_NEG_53 = 2.0 ** -53


def _seed_words(*seed):
    words = []
    for s in seed:
        s = int(s)
        if s < 0:
            raise ValueError(f"seed components must be unsigned, got {s}")
        words.append(s)
    return words


class Stream:
    """A PCG64 stream seeded from one or more unsigned integers."""

    def __init__(self, *seed):
        if not seed:
            seed = (0,)
        self.seed = tuple(_seed_words(*seed))
        self._bits = np.random.PCG64(np.random.SeedSequence(list(self.seed)))

    def raw(self, size):
        return np.asarray(self._bits.random_raw(int(size)), dtype=np.uint64)

    def uniform(self, size):
        """Uniform doubles in [0, 1)."""
        return (self.raw(size) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def uniform_range(self, low, high, size):
        return low + (high - low) * self.uniform(size)

    def signs(self, size):
        """Independent fair +1/-1 draws from the top bit of each word."""
        top = (self.raw(size) >> np.uint64(63)).astype(np.int64)
        return 2 * top - 1

    def normal(self, size):
        """Standard normals via the Box-Muller transform (both branches used)."""
        size = int(size)
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        t = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(t)
        z[1::2] = r * np.sin(t)
        return z[:size]

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n) driven by this stream."""
        n = int(n)
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n, p):
        """One index drawn from the discrete distribution ``p`` over range(n)."""
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        target = self.uniform(1)[0] * cdf[-1]
        idx = int(np.searchsorted(cdf, target, side="right"))
        return min(idx, n - 1)
