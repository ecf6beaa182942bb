"""Counter-based deterministic random number generation.

Every random choice in the project flows from a single root seed through
named substreams, so independent consumers (world generation, masking,
rollouts, ...) draw from disjoint streams and any run is reproducible from
its seed alone. The generator is a stateless mixing function applied to
(seed, counter), which makes substream derivation cheap and makes the
stream independent of draw granularity.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK64
        return z ^ (z >> np.uint64(31))


def _hash_name(name: str) -> int:
    h = _FNV_OFFSET
    for b in name.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    """Counter-based generator: identical (seed, call sequence) -> identical stream."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def clone(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def substream(self, name: str) -> "Rng":
        """Independent stream derived from a label; does not advance this stream."""
        derived = int(_mix(np.uint64(self.seed ^ _hash_name(name))))
        return Rng(derived)

    def spawn(self, index: int) -> "Rng":
        """Independent numbered stream (for per-episode / per-worker use)."""
        derived = int(_mix(np.uint64((self.seed + 0x632BE59BD9B4E019 * (index + 1)) & 0xFFFFFFFFFFFFFFFF)))
        return Rng(derived)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix((np.uint64(self.seed) + _mix(idx)) & _MASK64)

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        """Uniform floats in [low, high); scalar when n is None."""
        m = 1 if n is None else int(n)
        u = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def normal(self, shape=None, std: float = 1.0):
        """Standard normal draws via Box-Muller; scalar when shape is None."""
        size = 1 if shape is None else int(np.prod(shape))
        m = size + (size & 1)
        u = (self._raw(2 * m) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u1 = np.clip(u[:m], 1e-300, None)
        u2 = u[m:]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        z = z[:size] * std
        if shape is None:
            return float(z[0])
        return z.reshape(shape)

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high); scalar when n is None."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        m = 1 if n is None else int(n)
        vals = low + (self._raw(m) % np.uint64(span)).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def bernoulli(self, p: float, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        out = u < p
        return bool(out[0]) if n is None else out

    def choice(self, items):
        return items[self.integers(0, len(items))]

    def shuffled(self, items: list) -> list:
        """Fisher-Yates shuffle of a copy."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def weighted_choice(self, weights) -> int:
        total = float(sum(weights))
        u = self.uniform() * total
        acc = 0.0
        for i, w in enumerate(weights):
            acc += float(w)
            if u < acc:
                return i
        return len(weights) - 1
