"""Deterministic, counter-based random number generation.

Every stochastic operation in the package draws from an explicit
:class:`Rng` stream so that runs are reproducible bit-for-bit from a
single 64-bit seed.

The generator is SplitMix64 run in counter mode: draw ``i`` of a stream
with key ``k`` is ``mix64(k + (i + 1) * GOLDEN)`` where ``mix64`` is the
SplitMix64 finalizer (Steele, Lea and Flood's 2014 mixing constants) and
``GOLDEN = 0x9E3779B97F4A7C15``. Because each output depends only on
``(key, counter)``, streams can be split without coordination:
:meth:`Rng.child` derives an independent key by hashing a tag into the
parent key, so parallel workers never share draws.

Uniform doubles take the top 53 bits of a 64-bit word; Gaussians use the
Box-Muller transform on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64 = np.uint64
_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _fnv1a(data: bytes) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in data:
            h = (h ^ _U64(b)) * _FNV_PRIME
    return h


class Rng:
    """SplitMix64 counter-mode stream with a 64-bit key.

    Identical ``(seed, draw sequence)`` pairs produce identical outputs
    on every platform; the state is just ``(key, counter)`` and can be
    serialized.
    """

    __slots__ = ("key", "counter")

    def __init__(self, seed: int):
        self.key = _U64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    # -- state ------------------------------------------------------------

    def state(self) -> tuple[int, int]:
        return int(self.key), self.counter

    @classmethod
    def from_state(cls, key: int, counter: int) -> "Rng":
        rng = cls(key)
        rng.counter = int(counter)
        return rng

    def child(self, tag: str | int) -> "Rng":
        """Derive an independent stream keyed by ``tag``.

        The child key mixes the tag's FNV-1a hash into the parent key, so
        children with distinct tags (or of distinct parents) do not
        collide in practice. The parent's counter is untouched.
        """
        if isinstance(tag, int):
            data = tag.to_bytes(8, "little", signed=False) if tag >= 0 else str(tag).encode()
        else:
            data = str(tag).encode("utf-8")
        with np.errstate(over="ignore"):
            mixed = _mix64(np.asarray((self.key ^ _fnv1a(data)) + _GOLDEN, dtype=np.uint64))
        return Rng(int(mixed))

    # -- raw draws --------------------------------------------------------

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
            words = _mix64(self.key + idx * _GOLDEN)
        self.counter += n
        return words

    def uniform(self, shape: tuple[int, ...] = ()) -> np.ndarray | float:
        """i.i.d. uniforms on [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else float(u[0])

    def integers(self, lo: int, hi: int, shape: tuple[int, ...] = ()) -> np.ndarray | int:
        """Uniform integers in [lo, hi). Uses rejection-free modular draw;
        bias is negligible for the small ranges used here."""
        n = int(np.prod(shape)) if shape else 1
        span = hi - lo
        if span <= 0:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        vals = (self._raw(n) % _U64(span)).astype(np.int64) + lo
        return vals.reshape(shape) if shape else int(vals[0])

    def gaussian(self, shape: tuple[int, ...], sigma: float = 1.0) -> np.ndarray:
        """i.i.d. N(0, sigma^2) draws via Box-Muller.

        ``sigma = 0`` returns exact zeros (the stream still advances by
        the same amount, keeping downstream draws aligned).
        """
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        n = int(np.prod(shape))
        m = (n + 1) // 2
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        w = self._raw(2 * m)
        u1 = ((w[:m] >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (w[m:] >> _U64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (sigma * z).reshape(shape)
