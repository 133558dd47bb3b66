"""Seeded, splittable random streams.

Every randomized routine takes an explicit ``(seed, stream)`` pair. Bits come
from a PCG64 generator keyed by ``SeedSequence([seed, stream])``; uniforms
are built from the top 53 bits of each 64-bit word and normals use the
Box-Muller transform, so draws depend only on integer and float64 arithmetic.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


class RngStream:
    """A single deterministic stream of u64 / uniform / normal draws."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        ss = np.random.SeedSequence([self.seed, self.stream])
        self._bits = np.random.PCG64(ss)
        self._spare: np.ndarray | None = None

    def u64(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws on [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller (pairs are consumed whole)."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1]
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        z = z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Integers uniform on ``{0, ..., high-1}``."""
        n = 1 if size is None else int(np.prod(size))
        k = np.floor(self.uniform(n) * high).astype(np.int64)
        k = np.minimum(k, high - 1)
        return int(k[0]) if size is None else k.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by this stream's uniforms
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def gamma(self, shape: float, size=None) -> np.ndarray | float:
        """Gamma(shape, 1) draws by Marsaglia-Tsang squeeze/rejection."""
        n = 1 if size is None else int(np.prod(size))
        if shape <= 0:
            raise ValueError("gamma shape must be positive")
        boost = shape < 1.0
        a = shape + 1.0 if boost else shape
        d = a - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n)
        filled = 0
        while filled < n:
            need = n - filled
            x = self.normal(need)
            u = self.uniform(need)
            v = (1.0 + c * x) ** 3
            ok = v > 0
            with np.errstate(invalid="ignore", divide="ignore"):
                accept = ok & (
                    (u < 1.0 - 0.0331 * x**4)
                    | (np.log(np.where(u > 0, u, 1e-300)) < 0.5 * x**2 + d * (1.0 - v + np.log(np.where(ok, v, 1.0))))
                )
            got = (d * v)[accept]
            out[filled:filled + got.size] = got
            filled += got.size
        if boost:
            out *= self.uniform(n) ** (1.0 / shape)
        return float(out[0]) if size is None else out.reshape(size)

    def chisquare(self, df: float, size=None) -> np.ndarray | float:
        """Chi-square draws: sum of squared normals for small integer df, else 2*Gamma(df/2)."""
        n = 1 if size is None else int(np.prod(size))
        if float(df).is_integer() and 0 < df <= _SUMSQ_MAX_DF:
            k = int(df)
            out = np.sum(self.normal((n, k)) ** 2, axis=1)
        else:
            out = 2.0 * np.asarray(self.gamma(df / 2.0, n))
        return float(out[0]) if size is None else out.reshape(size)


_SUMSQ_MAX_DF = 64


def rng_stream(seed: int, stream: int = 0) -> RngStream:
    return RngStream(seed, stream)
