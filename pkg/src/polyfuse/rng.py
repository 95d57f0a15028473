"""Deterministic counter-based random streams.

Every random draw in this package flows from a 64-bit key through the
SplitMix64 finalizer applied to a counter.  The u64 stream is normative:
given the same key and counter, any implementation must reproduce it
bit for bit.  Floating-point outputs are derived from the u64 stream as
documented on each function (uniforms take the top 53 bits; normals use
Box-Muller, whose transcendental steps are correct to f64 rounding).

Keys are built with ``derive_key``, which hashes an arbitrary mix of
string labels and integers (FNV-1a over bytes, SplitMix64-finalized), so
independent pipeline stages get independent streams from one user seed.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x00000100000001B3


def splitmix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a u64 array."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_int(z: int) -> int:
    """SplitMix64 finalizer on a plain Python integer (mod 2^64)."""
    mask = 0xFFFFFFFFFFFFFFFF
    z &= mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def derive_key(*parts: int | str | bytes) -> int:
    """Hash labels and integers into a 64-bit stream key.

    FNV-1a over the UTF-8/byte/LE-u64 encoding of each part, with a
    length-tagged separator per part so ("ab", "c") != ("a", "bc"),
    then one SplitMix64 finalization.
    """
    h = _FNV_OFFSET
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, bytes):
            data = part
        elif isinstance(part, (int, np.integer)):
            data = int(part & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        else:
            raise TypeError(f"cannot derive key from {type(part).__name__}")
        for b in len(data).to_bytes(4, "little") + data:
            h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return splitmix64_int(h)


class Stream:
    """Counter-based deterministic random stream.

    value[i] = splitmix64(key + (counter + i + 1) * GOLDEN).  Draws
    advance the counter; u64 and uniform draws are batching-invariant
    (same key and positions give the same values however calls are
    split).  Normal draws consume whole u64 pairs, so an odd-length
    draw advances the counter by one padding slot.
    """

    def __init__(self, key: int, counter: int = 0):
        self.key = np.uint64(key & 0xFFFFFFFFFFFFFFFF)
        self.counter = counter

    def next_u64(self, n: int) -> np.ndarray:
        """Next n raw u64 values."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return splitmix64(self.key + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1): top 53 bits of each u64, scaled by 2^-53."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive u64 pairs.

        Pair (a, b) -> r = sqrt(-2 ln u1), z0 = r cos(2 pi u2),
        z1 = r sin(2 pi u2), with u1 = ((a >> 11) + 1) * 2^-53 in (0, 1]
        and u2 = (b >> 11) * 2^-53 in [0, 1).  Odd n drops the last z1.
        """
        m = (n + 1) // 2
        raw = self.next_u64(2 * m).reshape(m, 2)
        u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randint(self, bound: int) -> int:
        """One integer in [0, bound) via modulo (bias < 2^-40 for desk-scale bounds)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.next_u64(1)[0] % np.uint64(bound))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def split(self, *parts: int | str) -> "Stream":
        """Independent child stream keyed by this key plus labels."""
        return Stream(derive_key(int(self.key), *parts))
