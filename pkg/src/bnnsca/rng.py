"""Seedable mask-stream provider with an "off" mode for leakage evaluation.

The generator is SplitMix64, fixed by the constants below so that any
reimplementation produces the same sequences:

    state(k)  = (seed + (k + 1) * 0x9E3779B97F4A7C15) mod 2**64
    output(k) = mix64(state(k))

where ``mix64`` is the usual 30/27/31 xor-shift-multiply finalizer with
multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.  The stream is
counter-based: draw ``k`` is a pure function of ``(seed, k)``, which lets
batched simulation code evaluate any slice of a stream without consuming
state.  Cryptographic strength is not needed for simulation fidelity.

Child streams for parallel campaigns are derived with :func:`derive_seed`,
never by reusing a parent stream's outputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MIX_MUL1 = 0xBF58476D1CE4E5B9
_MIX_MUL2 = 0x94D049BB133111EB
_DERIVE_XOR = 0xA3EC647659359ACD
_DERIVE_MUL = 0xD1B54A32D192ED03
_MASK64 = (1 << 64) - 1


def mix64(z: int) -> int:
    """SplitMix64 output finalizer on a 64-bit integer."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_MUL2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, site_id: int) -> int:
    """Child seed for an independent stream at a numbered draw site.

    child = mix64((seed XOR DERIVE_XOR) + site_id * DERIVE_MUL).  The
    constants differ from the stream path so child seeds never collide
    with parent outputs.
    """
    return mix64(((seed ^ _DERIVE_XOR) + site_id * _DERIVE_MUL) & _MASK64)


def stream_words(seed: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit outputs for draw indices [start, start+count), stateless."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = (np.uint64(seed & _MASK64) + idx * np.uint64(GOLDEN))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_MUL2)
    return z ^ (z >> np.uint64(31))


def stream_bits(seed: int, start: int, count: int, nbits: int) -> np.ndarray:
    """Low ``nbits`` of each stream word, as uint64. 1 <= nbits <= 64."""
    if not 1 <= nbits <= 64:
        raise ValueError(f"bit count must be in [1, 64], got {nbits}")
    words = stream_words(seed, start, count)
    if nbits == 64:
        return words
    return words & np.uint64((1 << nbits) - 1)


def stream_bits_multi(seeds: np.ndarray, start: int, count: int, nbits: int) -> np.ndarray:
    """stream_bits for many independent streams at once: (len(seeds), count)."""
    if not 1 <= nbits <= 64:
        raise ValueError(f"bit count must be in [1, 64], got {nbits}")
    seeds = np.asarray(seeds, dtype=np.uint64)
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = seeds[:, None] + idx[None, :] * np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_MUL2)
    z = z ^ (z >> np.uint64(31))
    if nbits == 64:
        return z
    return z & np.uint64((1 << nbits) - 1)


def signed_view(values: np.ndarray, width: int) -> np.ndarray:
    """Reinterpret unsigned draws as two's-complement of the given width."""
    v = values.astype(np.int64)
    half = 1 << (width - 1)
    return v - (v >= half).astype(np.int64) * (1 << width)


class PrngMode(enum.Enum):
    ON = "on"
    OFF = "off"


@dataclass
class MaskStream:
    """Sequential mask source. Single-owner; not safe to share across runs.

    Every draw advances the counter by the number of values produced, in
    mode OFF as well, so a replayed simulation consumes identical counter
    ranges regardless of mode.
    """

    seed: int
    mode: PrngMode = PrngMode.ON
    counter: int = field(default=0)

    def draw_bits(self, nbits: int) -> int:
        """One draw, uniform over ``2**nbits`` values (mode ON) or 0 (OFF)."""
        if not 1 <= nbits <= 64:
            raise ValueError(f"bit count must be in [1, 64], got {nbits}")
        value = int(stream_bits(self.seed, self.counter, 1, nbits)[0])
        self.counter += 1
        if self.mode is PrngMode.OFF:
            return 0
        return value

    def draw_signed(self, width: int) -> int:
        """One draw in the two's-complement range of ``width`` bits."""
        v = self.draw_bits(width)
        if v >= 1 << (width - 1):
            v -= 1 << width
        return v

    def draw_bits_array(self, nbits: int, count: int) -> np.ndarray:
        """``count`` draws at once; same values as ``count`` single draws."""
        if not 1 <= nbits <= 64:
            raise ValueError(f"bit count must be in [1, 64], got {nbits}")
        values = stream_bits(self.seed, self.counter, count, nbits)
        self.counter += count
        if self.mode is PrngMode.OFF:
            return np.zeros(count, dtype=np.uint64)
        return values

    def draw_signed_array(self, width: int, count: int) -> np.ndarray:
        values = self.draw_bits_array(width, count).astype(np.int64)
        half = 1 << (width - 1)
        return values - (values >= half).astype(np.int64) * (1 << width)

    def child(self, site_id: int) -> "MaskStream":
        """Independent stream for a numbered sub-site (seed splitting)."""
        return MaskStream(derive_seed(self.seed, site_id), self.mode)
