"""Masking and dual-rail gadgets, width-parametric and vectorizable.

Every function here accepts plain ints or numpy arrays for its data
arguments (bits are 0/1 integers).  The register-level simulator composes
these gadgets; they are also exercised standalone and exhaustively at
reduced widths by the test suite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .rng import MaskStream


class GadgetError(ValueError):
    """Contract violation inside a gadget (e.g. dual-rail phase mismatch)."""


class Phase(enum.Enum):
    PRECHARGE = "precharge"
    EVALUATE = "evaluate"


@dataclass(frozen=True)
class DualRailBit:
    """A dual-rail encoded bit: true rail, false rail, and clocking phase.

    In PRECHARGE both rails are 0; in EVALUATE exactly one rail is 1.
    """

    t: object
    f: object
    phase: Phase

    def check(self) -> "DualRailBit":
        t = np.asarray(self.t)
        f = np.asarray(self.f)
        if self.phase is Phase.PRECHARGE:
            if np.any(t != 0) or np.any(f != 0):
                raise GadgetError("precharge rails must both be 0")
        else:
            if np.any((t ^ f) != 1):
                raise GadgetError("evaluate rails must be complementary")
        return self

    def value(self):
        if self.phase is not Phase.EVALUATE:
            raise GadgetError("no data value during precharge")
        return self.t


def dual_rail(value, phase: Phase = Phase.EVALUATE) -> DualRailBit:
    """Encode a plain bit (or bit array) into dual-rail form."""
    if phase is Phase.PRECHARGE:
        z = np.zeros_like(np.asarray(value))
        return DualRailBit(z, z, phase)
    v = np.asarray(value)
    return DualRailBit(v, 1 - v, phase).check()


def wddl_nand(a: DualRailBit, b: DualRailBit) -> DualRailBit:
    """Dual-rail NAND: true rail NAND(a,b), false rail AND(a,b).

    Both operands must be in the same phase; precharge in gives
    precharge out, which is what lets the precharge wave sweep through a
    gate network built from these.
    """
    if a.phase is not b.phase:
        raise GadgetError("wddl_nand operands must share a phase")
    # Positive-gate formulation: out.t = OR(a.f, b.f), out.f = AND(a.t, b.t).
    # With precharged (0,0) inputs both outputs stay 0.
    t = np.bitwise_or(np.asarray(a.f), np.asarray(b.f))
    f = np.bitwise_and(np.asarray(a.t), np.asarray(b.t))
    return DualRailBit(t, f, a.phase)


def wddl_not(a: DualRailBit) -> DualRailBit:
    """Dual-rail inversion is a free rail swap."""
    return DualRailBit(a.f, a.t, a.phase)


def wddl_and(a: DualRailBit, b: DualRailBit) -> DualRailBit:
    return wddl_not(wddl_nand(a, b))


def _nand3(a: DualRailBit, b: DualRailBit, c: DualRailBit) -> DualRailBit:
    return wddl_nand(wddl_and(a, b), c)


def _msb_network(a_msb: DualRailBit, b_msb: DualRailBit, carry: DualRailBit) -> DualRailBit:
    """NAND-only sum-MSB network: s = a ^ b ^ c via four 3-input NAND terms
    feeding a final 4-input NAND."""
    na, nb, nc = wddl_not(a_msb), wddl_not(b_msb), wddl_not(carry)
    t1 = _nand3(na, b_msb, nc)
    t2 = _nand3(a_msb, nb, nc)
    t3 = _nand3(a_msb, b_msb, carry)
    t4 = _nand3(na, nb, carry)
    return wddl_nand(wddl_and(t1, t2), wddl_and(t3, t4))


def wddl_msb_adder(a, b, width: int = 8):
    """Add two ``width``-bit signed operands; the sum MSB goes through the
    dual-rail NAND network with a precharge pass before evaluation.

    Returns ``(sum, msb, msb_complement)`` where ``sum`` is the exact
    (width+1)-bit signed value and ``msb``/``msb_complement`` are the two
    rails of its sign bit.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    mask = (1 << width) - 1
    low = (a & mask) + (b & mask)
    carry = (low >> width) & 1
    a_msb = (a >> (width - 1)) & 1
    b_msb = (b >> (width - 1)) & 1

    pre = _msb_network(
        dual_rail(a_msb, Phase.PRECHARGE),
        dual_rail(b_msb, Phase.PRECHARGE),
        dual_rail(carry, Phase.PRECHARGE),
    ).check()
    if np.any(np.asarray(pre.t) != 0):
        raise GadgetError("precharge wave did not clear the MSB network")
    out = _msb_network(dual_rail(a_msb), dual_rail(b_msb), dual_rail(carry)).check()

    total = a + b
    if np.any(((total >> width) & 1) != np.asarray(out.t)):
        raise GadgetError("dual-rail MSB disagrees with arithmetic sign")
    if a.ndim == 0:
        return int(total), int(out.t), int(out.f)
    return total, np.asarray(out.t), np.asarray(out.f)


@dataclass(frozen=True)
class BooleanSharePair:
    """Two Boolean shares; share1 XOR share2 is the logical value."""

    share1: object
    share2: object

    def recombine(self):
        return np.bitwise_xor(np.asarray(self.share1), np.asarray(self.share2))


@dataclass(frozen=True)
class ArithmeticSharePair:
    """Arithmetic shares (mask r, masked value x - r); r + masked = x."""

    mask: object
    masked: object

    def recombine(self):
        return np.asarray(self.mask) + np.asarray(self.masked)


def mask_value(x, r) -> ArithmeticSharePair:
    """Split ``x`` into (r, x - r) for a given mask."""
    return ArithmeticSharePair(np.asarray(r), np.asarray(x) - np.asarray(r))


def mask_inputs(values, stream: MaskStream) -> ArithmeticSharePair:
    """Split each value with a fresh unsigned 8-bit mask from the stream.

    Mode OFF yields (0, x) for every value.
    """
    values = np.asarray(values, dtype=np.int64)
    masks = stream.draw_bits_array(8, values.size).astype(np.int64)
    return ArithmeticSharePair(masks, values - masks)


def xnor_one_share(pair: BooleanSharePair, w) -> BooleanSharePair:
    """Binary multiply-by-weight on a shared bit: XNOR only share1 with w."""
    s1 = np.bitwise_xor(np.asarray(pair.share1), np.asarray(w)) ^ 1
    return BooleanSharePair(s1, pair.share2)


def b2a_core(p1, p2, q1, q2, r):
    """Boolean-to-arithmetic LUT for two weighted activation share pairs.

    Inputs are the four share bits of two consecutive weighted activations
    plus a fresh 2-bit signed random r in [-2, 1].  The secret pair sum
    a = (2*(p1^p2)-1) + (2*(q1^q2)-1) lies in {-2, 0, 2}; the outputs are
    (r, a - r) with a - r in [-3, 4].
    """
    p = np.bitwise_xor(np.asarray(p1), np.asarray(p2)).astype(np.int64)
    q = np.bitwise_xor(np.asarray(q1), np.asarray(q2)).astype(np.int64)
    a = (2 * p - 1) + (2 * q - 1)
    r = np.asarray(r, dtype=np.int64)
    return r, a - r


def b2a_convert(pair1: BooleanSharePair, pair2: BooleanSharePair, stream: MaskStream) -> ArithmeticSharePair:
    """Convert two weighted Boolean share pairs into one arithmetic pair."""
    n = np.asarray(pair1.share1).size
    r = stream.draw_signed_array(2, n)
    if np.asarray(pair1.share1).ndim == 0:
        r = r[0]
    mask, masked = b2a_core(pair1.share1, pair1.share2, pair2.share1, pair2.share2, r)
    return ArithmeticSharePair(mask, masked)


def _as_bit(v, j):
    return (v >> j) & 1


def sign_chain_registers(s1, s2, rand_bits, width: int):
    """Masked ripple-carry sign/binarize chain over two arithmetic shares.

    The chain decides ``s1 + s2 > 0`` by computing the sign of
    ``s1 + (s2 - 1)`` so that a zero sum binarizes to 0.  Stage j < width-1
    is a carry LUT producing the registered pair (m_j = r_j,
    mc_j = r_j XOR carry_j); the last stage is the binarizer producing the
    two output shares re-randomized with its own fresh bit.  No carry ever
    exists unmasked: only (r, r XOR carry) values appear.

    Parameters
    ----------
    s1, s2 : int or array
        The two shares; both s1 + s2 and s1 + s2 - 1 must be representable
        in ``width``-bit two's complement (the datapath widths guarantee
        this with an order-of-magnitude margin).
    rand_bits : array, shape (..., width)
        One fresh bit per LUT stage.
    width : int
        Chain width; the full-scale datapath uses 19.

    Returns a dict with per-stage register values ``m`` and ``mc`` (shape
    (..., width-1)), the output shares ``b1``/``b2`` and the residual hold
    register values ``hold1``/``hold2`` (share bits not yet consumed at
    each stage, shape (..., width)).
    """
    s1 = np.asarray(s1, dtype=np.int64)
    s2 = np.asarray(s2, dtype=np.int64)
    rand_bits = np.asarray(rand_bits, dtype=np.int64)
    mask = (1 << width) - 1
    u1 = s1 & mask
    u2 = (s2 - 1) & mask

    m = np.empty(s1.shape + (width - 1,), dtype=np.int64)
    mc = np.empty_like(m)
    hold1 = np.empty(s1.shape + (width,), dtype=np.int64)
    hold2 = np.empty_like(hold1)
    carry_masked = None
    carry_mask = None
    for j in range(width - 1):
        hold1[..., j] = (u1 >> j) & ((1 << (width - j)) - 1)
        hold2[..., j] = (u2 >> j) & ((1 << (width - j)) - 1)
        a = _as_bit(u1, j)
        b = _as_bit(u2, j)
        r = rand_bits[..., j]
        if j == 0:
            carry = a & b
        else:
            # One atomic LUT: recombines the incoming masked carry
            # internally and remasks with the fresh bit.
            cin = carry_mask ^ carry_masked
            carry = (a & b) | (cin & (a ^ b))
        m[..., j] = r
        mc[..., j] = r ^ carry
        carry_mask = m[..., j]
        carry_masked = mc[..., j]
    j = width - 1
    hold1[..., j] = (u1 >> j) & 1
    hold2[..., j] = (u2 >> j) & 1
    sign = _as_bit(u1, j) ^ _as_bit(u2, j) ^ (carry_mask ^ carry_masked)
    act = sign ^ 1
    r = rand_bits[..., j]
    b1 = r
    b2 = r ^ act
    return {"m": m, "mc": mc, "b1": b1, "b2": b2, "hold1": hold1, "hold2": hold2}


def masked_sign_chain(s1, s2, stream: MaskStream, width: int = 19) -> BooleanSharePair:
    """Binarize a shared sum: shares of 1 if s1 + s2 > 0 else 0."""
    s1a = np.asarray(s1)
    n = s1a.size
    bits = stream.draw_bits_array(1, n * width).astype(np.int64)
    bits = bits.reshape(s1a.shape + (width,)) if s1a.ndim else bits.reshape(width)
    regs = sign_chain_registers(s1, s2, bits, width)
    if s1a.ndim == 0:
        return BooleanSharePair(int(regs["b1"]), int(regs["b2"]))
    return BooleanSharePair(regs["b1"], regs["b2"])


def masked_output_compare(a: ArithmeticSharePair, b: ArithmeticSharePair, stream: MaskStream, width: int = 19) -> int:
    """1 iff recombined(a) >= recombined(b), without forming either score.

    Feeds (a1 - b2 + 1) and (a2 - b1) through the sign chain:
    the +1 turns the strict > 0 decision into >= 0, so ties keep the
    earlier tournament index.  Only the final comparison bit is
    recombined.
    """
    u = np.asarray(a.mask) - np.asarray(b.masked) + 1
    v = np.asarray(a.masked) - np.asarray(b.mask)
    pair = masked_sign_chain(u, v, stream, width)
    out = pair.recombine()
    return int(out) if np.asarray(out).ndim == 0 else out
