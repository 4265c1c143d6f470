"""Counter-based random number generation.

All randomness in the package flows through one pinned construction so that
results are reproducible bit-for-bit across runs: the i-th raw 64-bit sample
of a stream is ``mix64(key + (i + 1) * GOLDEN)`` where ``mix64`` is the
splitmix64 finalizer. There is no hidden generator state; any slice of a
stream can be regenerated from (key, start index) alone. Gaussian variates
use the Box-Muller transform on consecutive uniform pairs.

Stream keys are derived from an integer seed plus an optional string label
(FNV-1a over the label bytes, mixed with the seed), which lets independent
consumers (per-parameter init, per-sample data synthesis) draw from
non-overlapping streams of a single user-facing seed.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, label: str = "") -> int:
    """Derive a 64-bit stream key from a seed and an optional label."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    with np.errstate(over="ignore"):
        k = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN ^ np.uint64(h)
        return int(_mix64(k[None])[0])


def raw_uint64(key: int, count: int, start: int = 0) -> np.ndarray:
    """Samples ``start .. start+count-1`` of the stream, as uint64."""
    with np.errstate(over="ignore"):
        idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
        return _mix64(np.uint64(key & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN)


def uniform(key: int, count: int, start: int = 0) -> np.ndarray:
    """float64 uniforms in [0, 1): top 53 bits of each raw sample / 2^53."""
    bits = raw_uint64(key, count, start) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def gaussian(key: int, count: int, mean: float = 0.0, std: float = 1.0,
             start: int = 0) -> np.ndarray:
    """float64 N(mean, std^2) variates via Box-Muller.

    Each output pair consumes two raw samples, so sample i of the stream
    depends only on raw samples 2*(i//2) and 2*(i//2)+1 (offset by start,
    which must be even to keep slices aligned).
    """
    if start % 2 != 0:
        raise ValueError("gaussian stream offsets must be even")
    pairs = (count + 1) // 2
    raw = raw_uint64(key, 2 * pairs, start)
    # u1 in (0, 1] so log(u1) is finite.
    u1 = (raw[0::2] >> np.uint64(11)).astype(np.float64)
    u1 = (u1 + 1.0) * (1.0 / (1 << 53))
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return mean + std * out[:count]


class RandomStream:
    """Cursor over one counter-based stream, for sequential consumers."""

    def __init__(self, key: int):
        self.key = key
        self._cursor = 0

    def _take(self, n: int) -> int:
        start = self._cursor
        self._cursor += n
        return start

    def uniform(self, count: int) -> np.ndarray:
        return uniform(self.key, count, self._take(count))

    def gaussian(self, count: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        # Round the reservation up to a pair boundary so later draws stay aligned.
        pairs = 2 * ((count + 1) // 2)
        start = self._take(pairs)
        return gaussian(self.key, count, mean, std, start)

    def integers(self, count: int, low: int, high: int) -> np.ndarray:
        """Integers in [low, high), from uniforms (fine for data synthesis)."""
        if high <= low:
            raise ValueError("need high > low")
        u = self.uniform(count)
        return (low + np.floor(u * (high - low))).astype(np.int64)
