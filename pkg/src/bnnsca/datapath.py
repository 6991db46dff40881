"""Register-level simulator of the inference engine, unmasked and masked.

The accelerator is a fully pipelined binary adder tree that is reused for
every layer: each clock cycle one neuron row enters the tree, and stage s
holds that row's pairwise partial sums s cycles later.  Because the
pipeline has no feedback, the value held by any register at any cycle is
a pure function of (row, stage), so the simulator computes whole
row-by-stage matrices at once and exposes them through :class:`CycleTrace`
with exact per-cycle semantics.  This is what keeps hundred-thousand-trace
campaigns tractable without giving up cycle accuracy; the equivalence with
naive per-cycle stepping is pinned by tests on reduced topologies.

Pipeline schedule (documented constants; all cycles are absolute, cycle 0
is the reset state with every register holding 0):

unmasked, per layer of R rows, tree depth D::

    T0 + n          feed rank latches row n (pixel negation for layer 1,
                    2-bit pair codes for later layers)
    T0 + n + s      tree stage s latches row n's partial sums
    T0 + n + D + 1  bias register latches row n (sum + bias)
    T0 + n + D + 2  activation register (hidden) / score bank (output)
    T0 + n + D + 3  activation buffer entry n
    next layer starts at T0 + R + D + 3

The output layer runs a register-compare tournament, one challenger per
cycle, starting one cycle after the first score is banked.

masked, per layer of R rows, chain width W = D + 9::

    T0              mask-split buffers latch (first layer only)
    T0 + 1 + n      feed rank latches row n, mask phase (phase 1)
    T0 + 1 + n + s  stage s, phase 1
    T0 + 1 + n + D + 1   demultiplexer buffer entry n (mask-side sum)
    P0 = T0 + R + D + 3  phase 2 (masked values) begins
    P0 + n + s      stage s, phase 2
    P0 + n + D + 1  bias register (masked sum + bias)
    P0 + n + D + 2  activation chain input holds latch row n
    P0 + n + D + 2 + 1 + j   chain LUT j output registers, j = 0..W-1
    P0 + n + D + 2 + W       chain output share registers
    P0 + n + D + 2 + W + 1   activation share buffer entries
    next layer starts one cycle later

Registers hold their last value between phases and layers (clock-enable
gating), so idle cycles contribute no transitions.  In the masked variant
the sign bit (MSB) of every tree-pipeline register is a dual-rail SDDL
pair; lower bits are ordinary flip-flops.  Every LUT output in the masked
activation chain and share converters is registered.

Mask stream slot map for :func:`run_masked` (counter-based, one slot per
drawn value, in this fixed order): first layer: in_dim 8-bit input masks,
then R*W chain bits; each later layer: R*pairs 2-bit converter randoms,
then R*W chain bits for hidden layers or (R-1)*W compare-chain bits for
the output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .gadgets import sign_chain_registers
from .model import BnnModel, ClassResult, check_image, sign_weights

#: Bit width of the tree feed rank (covers negated 8-bit pixels).
TREE_LEAF_BITS = 9


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _idx_bits(n: int) -> int:
    return max(1, (n - 1).bit_length())


def _popcount(values: np.ndarray) -> np.ndarray:
    # uint8 bit counts; values must already be masked to their register
    # width (hence non-negative). Callers pick the accumulation dtype.
    return np.bitwise_count(values)


@dataclass(frozen=True)
class Topology:
    """Static shape of the engine: layer widths plus derived tree geometry."""

    layer_dims: tuple

    def __post_init__(self):
        dims = tuple(self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ValueError("need input, at least one hidden layer, and output")
        if any(d < 1 for d in dims):
            raise ValueError("layer widths must be positive")
        for d in dims[1:-1]:
            if d % 2:
                raise ValueError("hidden widths must be even (pairwise compaction)")
        n_leaves = _next_pow2(dims[0])
        for d in dims[1:-1]:
            if d // 2 > n_leaves:
                raise ValueError("hidden layer too wide for the adder tree")
        if dims[-1] < 2:
            raise ValueError("output layer needs at least two classes")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_leaves(self) -> int:
        return _next_pow2(self.in_dim)

    @property
    def depth(self) -> int:
        return self.n_leaves.bit_length() - 1

    @property
    def chain_width(self) -> int:
        # Root register width; also the number of LUTs in the masked
        # activation chain (19 at full scale).
        return TREE_LEAF_BITS + self.depth

    def stage_width(self, s: int) -> int:
        return TREE_LEAF_BITS + s

    def check_model(self, model: BnnModel) -> None:
        if model.layer_dims != self.layer_dims:
            raise ValueError("model does not match topology")
        max_feed = 255 * self.in_dim
        for w, b in zip(model.weights, model.biases):
            if w.shape[1] != self.in_dim:
                max_feed = max(max_feed, 4 * (w.shape[1] // 2))
        worst = max_feed + max(int(np.abs(b).max(initial=0)) for b in model.biases)
        if worst + 1 >= 1 << (self.chain_width - 1):
            raise ValueError(
                f"sums up to {worst} overflow the {self.chain_width}-bit datapath; "
                "reduce bias magnitudes for this topology"
            )


def topology_for(model: BnnModel) -> Topology:
    return Topology(model.layer_dims)


@dataclass
class BankSegment:
    """A contiguous burst of writes into one register bank.

    modes:
      pipeline   event e writes every register at cycle start + e*stride
      staggered  event e writes register j at cycle start + e*stride + j
      once       event e writes register e only, at cycle start + e*stride
    """

    bank: str
    start: int
    values: np.ndarray
    width: object  # int, or per-register int array for staggered banks
    mode: str
    dual_msb: bool = False
    stride: int = 1

    @property
    def n_events(self) -> int:
        return self.values.shape[0]

    @property
    def n_regs(self) -> int:
        if self.mode == "once":
            return self.values.shape[0] if self.values.ndim == 1 else self.values.shape[1]
        return self.values.shape[1]


@dataclass
class CycleTrace:
    """Ground-truth register activity of one simulation run."""

    variant: str
    n_cycles: int
    segments: list
    meta: dict = field(default_factory=dict)

    def banks(self) -> dict:
        out: dict = {}
        for seg in self.segments:
            out.setdefault(seg.bank, []).append(seg)
        for segs in out.values():
            segs.sort(key=lambda s: s.start)
        return out

    def register_ids(self):
        ids = []
        for bank, segs in sorted(self.banks().items()):
            n = max(s.n_regs for s in segs)
            ids.extend(f"{bank}.reg{i}" for i in range(n))
        return ids

    def register_value(self, bank: str, reg: int, cycle: int) -> int:
        """Value held by a register at the END of the given cycle (hold
        semantics between writes; 0 before the first write)."""
        value = 0
        for seg in self.banks().get(bank, []):
            for e in range(seg.n_events):
                if seg.mode == "once":
                    if e != reg:
                        continue
                    when = seg.start + e * seg.stride
                    if when <= cycle:
                        value = int(np.asarray(seg.values[e]).reshape(-1)[0])
                else:
                    offset = reg if seg.mode == "staggered" else 0
                    when = seg.start + e * seg.stride + offset
                    if when <= cycle:
                        value = int(seg.values[e, reg])
        return value

    def leakage_components(self, include=("",), include_dual=None, kind="hd"):
        """Per-cycle transition totals: (ordinary HD sums, dual-rail
        transition counts, dual-rail true-rail sums).

        ``include`` filters ordinary contributions by bank-name prefix;
        ``include_dual`` (default: same) filters dual-rail contributions.
        kind "hw" replaces each register's hamming distance with the
        hamming weight of its new value.
        """
        if include_dual is None:
            include_dual = include
        hd = np.zeros(self.n_cycles, dtype=np.int64)
        dual_n = np.zeros(self.n_cycles, dtype=np.int64)
        rail = np.zeros(self.n_cycles, dtype=np.int64)
        for bank, segs in self.banks().items():
            inc = _prefix_match(bank, include)
            incd = _prefix_match(bank, include_dual)
            if not inc and not incd:
                continue
            n_regs = max(s.n_regs for s in segs)
            prev = np.zeros(n_regs, dtype=np.int64)
            for seg in segs:
                prev = _accumulate_segment(seg, prev, hd if inc else None,
                                           dual_n if incd else None,
                                           rail if incd else None, kind)
        return hd, dual_n, rail

    def to_csv(self, fh, banks=None, start: int = 0, stop=None) -> None:
        """Debug export: one row per register write, columns
        cycle,register_id,prev,curr.  Dual-rail sign bits additionally
        appear as .msb.t / .msb.f rows."""
        stop = self.n_cycles if stop is None else stop
        fh.write("cycle,register_id,prev,curr\n")
        rows = []
        for bank, segs in sorted(self.banks().items()):
            if banks is not None and not _prefix_match(bank, banks):
                continue
            n_regs = max(s.n_regs for s in segs)
            prev = np.zeros(n_regs, dtype=np.int64)
            for seg in segs:
                top_bit = None
                if seg.dual_msb:
                    top_bit = int(seg.width) - 1
                for e in range(seg.n_events):
                    if seg.mode == "once":
                        regs = [e]
                        vals = {e: int(np.asarray(seg.values[e]).reshape(-1)[0])}
                        cyc = seg.start + e * seg.stride
                        items = [(cyc, e, vals[e])]
                    elif seg.mode == "pipeline":
                        cyc = seg.start + e * seg.stride
                        items = [(cyc, j, int(seg.values[e, j])) for j in range(seg.n_regs)]
                    else:
                        items = [
                            (seg.start + e * seg.stride + j, j, int(seg.values[e, j]))
                            for j in range(seg.n_regs)
                        ]
                    for cyc, j, cur in items:
                        if start <= cyc < stop:
                            rows.append((cyc, f"{bank}.reg{j}", int(prev[j]), cur))
                            if top_bit is not None:
                                pt = (int(prev[j]) >> top_bit) & 1
                                ct = (cur >> top_bit) & 1
                                rows.append((cyc, f"{bank}.reg{j}.msb.t", pt, ct))
                                rows.append((cyc, f"{bank}.reg{j}.msb.f", 1 - pt, 1 - ct))
                        prev[j] = cur
        rows.sort(key=lambda r: (r[0], r[1]))
        for cyc, reg, p, c in rows:
            fh.write(f"{cyc},{reg},{p},{c}\n")


def _prefix_match(bank: str, prefixes) -> bool:
    return any(bank.startswith(p) for p in prefixes)


def _accumulate_segment(seg: BankSegment, prev: np.ndarray, hd, dual_n, rail, kind: str):
    """Add one segment's transitions into the per-cycle totals; returns the
    updated per-register previous values."""
    vals = seg.values
    if seg.mode == "once":
        vals = vals.reshape(seg.n_events)
        width = int(seg.width)
        mask = (1 << width) - 1
        cur = vals.astype(np.int64)
        base = (cur if kind == "hw" else cur ^ prev[: seg.n_events]) & mask
        if hd is not None:
            idx = seg.start + seg.stride * np.arange(seg.n_events)
            np.add.at(hd, idx, _popcount(base).astype(np.int64))
        prev = prev.copy()
        prev[: seg.n_events] = cur
        return prev

    cur = vals.astype(np.int64)
    n = seg.n_regs  # a narrower layer writes only the first n registers
    if seg.mode == "pipeline":
        width = int(seg.width)
        mask = (1 << width) - 1
        low_mask = mask >> 1 if seg.dual_msb else mask
        shifted = np.vstack([prev[None, :n], cur[:-1]])
        base = (cur if kind == "hw" else cur ^ shifted) & low_mask
        contrib = _popcount(base).sum(axis=1, dtype=np.int64)
        sl = slice(seg.start, seg.start + seg.stride * seg.n_events, seg.stride)
        if hd is not None:
            hd[sl] += contrib
        if seg.dual_msb and dual_n is not None:
            top = (cur >> (width - 1)) & 1
            dual_n[sl] += n
            rail[sl] += top.sum(axis=1)
        prev = prev.copy()
        prev[:n] = cur[-1]
        return prev

    # staggered: register j runs seg.stride-apart events, offset by j cycles
    widths = seg.width if np.ndim(seg.width) else np.full(n, seg.width)
    prev = prev.copy()
    for j in range(n):
        mask = (1 << int(widths[j])) - 1
        col = cur[:, j]
        shifted = np.concatenate([[prev[j]], col[:-1]])
        base = (col if kind == "hw" else col ^ shifted) & mask
        if hd is not None:
            sl = slice(seg.start + j, seg.start + j + seg.stride * seg.n_events, seg.stride)
            hd[sl] += _popcount(base).astype(np.int64)
        prev[j] = col[-1]
    return prev


def _tree_levels(leaves: np.ndarray) -> list:
    levels = []
    cur = leaves
    while cur.shape[-1] > 1:
        cur = cur[..., 0::2] + cur[..., 1::2]
        levels.append(cur)
    return levels


def _pad_leaves(values: np.ndarray, n_leaves: int) -> np.ndarray:
    out = np.zeros(values.shape[:-1] + (n_leaves,), dtype=np.int64)
    out[..., : values.shape[-1]] = values
    return out


def _hidden_feed_unmasked(w_bits: np.ndarray, acts: np.ndarray):
    """Per-row compaction: 1024 activation bits -> 512 halved pair codes."""
    prod = sign_weights(w_bits).astype(np.int64) * (2 * acts.astype(np.int64) - 1)
    return (prod[:, 0::2] + prod[:, 1::2]) // 2


def _hidden_feed_masked(w_bits: np.ndarray, a1: np.ndarray, a2: np.ndarray):
    """XNOR share1 with the row weights, recombine per LUT, pair-sum."""
    p1 = 1 ^ (a1[None, :].astype(np.int64) ^ w_bits.astype(np.int64))
    q = p1 ^ a2[None, :].astype(np.int64)  # weighted activation bits
    return (2 * q[:, 0::2] - 1) + (2 * q[:, 1::2] - 1)


# ---------------------------------------------------------------------------
# schedule arithmetic


def unmasked_layer_span(top: Topology, rows: int) -> int:
    return rows + top.depth + 3


def masked_layer_span(top: Topology, rows: int) -> int:
    return 2 * rows + 2 * top.depth + top.chain_width + 6


def layer_start(variant: str, top: Topology, layer: int, layer_rows) -> int:
    t0 = 1
    span = unmasked_layer_span if variant == "unmasked" else masked_layer_span
    for l in range(layer):
        t0 += span(top, layer_rows[l])
    return t0


def attack_origin(variant: str, top: Topology) -> int:
    """First feed cycle of the attacked (first) layer: T0 for the unmasked
    design, P0 (masked-value phase) for the masked one."""
    if variant == "unmasked":
        return 1
    rows = top.layer_dims[1]
    return 1 + 1 + rows + top.depth + 2


def target_cycle_rel(top: Topology, stage: int, node: int = 0) -> int:
    """Cycle, relative to the attack origin, at which the given tree stage
    latches the given node's sums.  stage == depth+1 addresses the bias
    register."""
    return node + stage


def latency(variant: str, topology: Topology, layer_rows=None) -> int:
    """Deterministic cycle count of one inference, including the argmax."""
    rows = list(topology.layer_dims[1:]) if layer_rows is None else list(layer_rows)
    hidden, out = rows[:-1], rows[-1]
    if variant == "unmasked":
        t0 = 1 + sum(unmasked_layer_span(topology, r) for r in hidden)
        # scores bank from +D+2, tournament one challenger/cycle from +D+3
        return t0 + (out - 1) + topology.depth + 3 + 1
    if variant == "masked":
        w = topology.chain_width
        t0 = 1 + sum(masked_layer_span(topology, r) for r in hidden)
        base = t0 + 2 * out + 2 * topology.depth + 5
        return base + (out - 1) * (w + 1) + 1
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# single-run simulators


def run_unmasked(model: BnnModel, image: np.ndarray):
    """Simulate the unprotected engine; returns (ClassResult, CycleTrace)."""
    top = topology_for(model)
    top.check_model(model)
    image = check_image(image, top.in_dim)
    segments = []
    t0 = 1
    acts = None
    scores = None
    n_cycles = 0
    final = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        rows = w.shape[0]
        if l == 0:
            sgn = sign_weights(w).astype(np.int64)
            leaves = _pad_leaves(sgn * image.astype(np.int64), top.n_leaves)
            segments.append(BankSegment("leaf", t0, leaves, TREE_LEAF_BITS, "pipeline"))
        else:
            half = _hidden_feed_unmasked(w, acts)
            segments.append(BankSegment("code", t0, half, 2, "pipeline"))
            leaves = _pad_leaves(2 * half, top.n_leaves)
        levels = _tree_levels(leaves)
        for s, vals in enumerate(levels, start=1):
            segments.append(
                BankSegment(f"stage{s}", t0 + s, vals, top.stage_width(s), "pipeline")
            )
        biasv = levels[-1][:, 0] + b
        segments.append(
            BankSegment("bias", t0 + top.depth + 1, biasv[:, None], top.chain_width, "pipeline")
        )
        if l < final:
            bits = (biasv > 0).astype(np.int64)
            segments.append(BankSegment("act", t0 + top.depth + 2, bits[:, None], 1, "pipeline"))
            segments.append(BankSegment("abuf", t0 + top.depth + 3, bits, 1, "once"))
            acts = bits
            t0 += unmasked_layer_span(top, rows)
        else:
            scores = biasv
            segments.append(
                BankSegment("score", t0 + top.depth + 2, scores, top.chain_width, "once")
            )
            best = np.maximum.accumulate(scores)
            idx = np.zeros(rows, dtype=np.int64)
            for k in range(1, rows):
                idx[k] = k if scores[k] > best[k - 1] else idx[k - 1]
            cmp_start = t0 + top.depth + 3
            segments.append(
                BankSegment("cmp.best", cmp_start, best[:, None], top.chain_width, "pipeline")
            )
            segments.append(
                BankSegment("cmp.idx", cmp_start, idx[:, None], _idx_bits(rows), "pipeline")
            )
            n_cycles = cmp_start + (rows - 1) + 1
            label = int(idx[-1])
    result = ClassResult(label=label, scores=tuple(int(v) for v in scores))
    trace = CycleTrace("unmasked", n_cycles, segments, meta={"layer_dims": top.layer_dims})
    return result, trace


def run_masked(model: BnnModel, image: np.ndarray, stream: rng.MaskStream):
    """Simulate the masked engine; label matches the reference regardless
    of the stream's seed or mode."""
    top = topology_for(model)
    top.check_model(model)
    image = check_image(image, top.in_dim)
    W = top.chain_width
    segments = []
    t0 = 1
    a1 = a2 = None
    final = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        rows = w.shape[0]
        if l == 0:
            masks = stream.draw_bits_array(8, top.in_dim).astype(np.int64)
            masked_vals = image.astype(np.int64) - masks
            # Split buffers latch the whole layer's shares in one cycle.
            segments.append(BankSegment("mbuf", t0, masks[None, :], 8, "pipeline"))
            segments.append(BankSegment("xbuf", t0, masked_vals[None, :], TREE_LEAF_BITS, "pipeline"))
            sgn = sign_weights(w).astype(np.int64)
            p1_leaves = _pad_leaves(sgn * masks, top.n_leaves)
            p2_leaves = _pad_leaves(sgn * masked_vals, top.n_leaves)
        else:
            pairs = w.shape[1] // 2
            r2 = stream.draw_signed_array(2, rows * pairs).reshape(rows, pairs)
            aval = _hidden_feed_masked(w, a1, a2)
            p1_leaves = _pad_leaves(r2, top.n_leaves)
            p2_leaves = _pad_leaves(aval - r2, top.n_leaves)

        f1 = t0 + 1
        levels1 = _tree_levels(p1_leaves)
        segments.append(BankSegment("leaf", f1, p1_leaves, TREE_LEAF_BITS, "pipeline", dual_msb=True))
        for s, vals in enumerate(levels1, start=1):
            segments.append(
                BankSegment(f"stage{s}", f1 + s, vals, top.stage_width(s), "pipeline", dual_msb=True)
            )
        pbuf = levels1[-1][:, 0]
        segments.append(BankSegment("pbuf", f1 + top.depth + 1, pbuf, W, "once"))

        p0 = t0 + rows + top.depth + 3
        levels2 = _tree_levels(p2_leaves)
        segments.append(BankSegment("leaf", p0, p2_leaves, TREE_LEAF_BITS, "pipeline", dual_msb=True))
        for s, vals in enumerate(levels2, start=1):
            segments.append(
                BankSegment(f"stage{s}", p0 + s, vals, top.stage_width(s), "pipeline", dual_msb=True)
            )
        biasv = levels2[-1][:, 0] + b
        segments.append(
            BankSegment("bias", p0 + top.depth + 1, biasv[:, None], W, "pipeline", dual_msb=True)
        )

        if l < final:
            cin = p0 + top.depth + 2
            bits = stream.draw_bits_array(1, rows * W).astype(np.int64).reshape(rows, W)
            regs = sign_chain_registers(pbuf, biasv, bits, W)
            segments.extend(_chain_segments(regs, cin, W))
            b1v, b2v = regs["b1"], regs["b2"]
            segments.append(BankSegment("achain.b1", cin + W, b1v[:, None], 1, "pipeline"))
            segments.append(BankSegment("achain.b2", cin + W, b2v[:, None], 1, "pipeline"))
            segments.append(BankSegment("abuf1", cin + W + 1, b1v, 1, "once"))
            segments.append(BankSegment("abuf2", cin + W + 1, b2v, 1, "once"))
            a1, a2 = b1v, b2v
            t0 += masked_layer_span(top, rows)
        else:
            segments.append(BankSegment("score2", p0 + top.depth + 2, biasv, W, "once"))
            scores = pbuf + biasv
            base = p0 + rows + top.depth + 2
            best1, best2, besti = int(pbuf[0]), int(biasv[0]), 0
            cmp1 = [best1]
            cmp2 = [best2]
            cmpi = [0]
            for k in range(1, rows):
                u = best1 - int(biasv[k]) + 1
                v = best2 - int(pbuf[k])
                cbits = stream.draw_bits_array(1, W).astype(np.int64).reshape(1, W)
                regs = sign_chain_registers(np.asarray([u]), np.asarray([v]), cbits, W)
                t_k = base + (k - 1) * (W + 1)
                segments.extend(_chain_segments(regs, t_k, W))
                keep = int(regs["b1"][0] ^ regs["b2"][0])
                segments.append(BankSegment("achain.b1", t_k + W, regs["b1"][:, None], 1, "pipeline"))
                segments.append(BankSegment("achain.b2", t_k + W, regs["b2"][:, None], 1, "pipeline"))
                if not keep:
                    best1, best2, besti = int(pbuf[k]), int(biasv[k]), k
                cmp1.append(best1)
                cmp2.append(best2)
                cmpi.append(besti)
            cmp_vals = np.asarray(cmp1)
            segments.append(BankSegment("cmp.b1", base, cmp_vals[:, None], W, "pipeline", stride=W + 1))
            segments.append(BankSegment("cmp.b2", base, np.asarray(cmp2)[:, None], W, "pipeline", stride=W + 1))
            segments.append(BankSegment("cmp.idx", base, np.asarray(cmpi)[:, None], _idx_bits(rows), "pipeline", stride=W + 1))
            n_cycles = base + (rows - 1) * (W + 1) + 1
            label = besti
    result = ClassResult(label=label, scores=tuple(int(v) for v in scores))
    trace = CycleTrace(
        "masked",
        n_cycles,
        segments,
        meta={"layer_dims": top.layer_dims, "seed": stream.seed, "mode": stream.mode.value},
    )
    return result, trace


def _chain_segments(regs: dict, cin: int, W: int) -> list:
    hold_widths = np.array([W - j for j in range(W)])
    events = regs["hold1"].shape[0] if regs["hold1"].ndim > 1 else 1
    h1 = regs["hold1"].reshape(events, W)
    h2 = regs["hold2"].reshape(events, W)
    m = regs["m"].reshape(events, W - 1)
    mc = regs["mc"].reshape(events, W - 1)
    return [
        BankSegment("achain.hold1", cin, h1, hold_widths, "staggered"),
        BankSegment("achain.hold2", cin, h2, hold_widths, "staggered"),
        BankSegment("achain.m", cin + 1, m, np.ones(W - 1, dtype=np.int64), "staggered"),
        BankSegment("achain.mc", cin + 1, mc, np.ones(W - 1, dtype=np.int64), "staggered"),
    ]


# ---------------------------------------------------------------------------
# batched first-layer window kernels for trace campaigns
#
# Campaign attacks target node 0 of the first layer, so only a short cycle
# window from the attack origin onward matters.  These kernels reproduce,
# for a whole batch of traces at once, exactly the per-cycle transition
# totals that CycleTrace.leakage_components would report inside that
# window; the masked kernel reconstructs the phase-1 pipeline drain state
# functionally instead of stepping through the mask phase.  Agreement with
# the single-run path is pinned by tests.


@dataclass
class WindowComponents:
    """Per-bank transition totals for a batch of traces over a window."""

    variant: str
    origin: int
    n_cycles: int
    banks: dict
    aux: dict = field(default_factory=dict)

    def total(self, include=("",), include_dual=None, epsilon: float = 0.0):
        """Combine bank components into raw (noise-free) samples."""
        if include_dual is None:
            include_dual = include
        first = next(iter(self.banks.values()))
        out = np.zeros_like(first["hd"], dtype=np.float64)
        for name, comp in self.banks.items():
            if _prefix_match(name, include):
                out += comp["hd"]
            if comp.get("dual") is not None and _prefix_match(name, include_dual):
                out += comp["dual"][None, :]
                out += epsilon * comp["rail"]
        return out


class _WindowAccum:
    def __init__(self, n_traces: int, n_cycles: int, kind: str):
        self.T = n_cycles
        self.B = n_traces
        self.kind = kind
        self.banks: dict = {}

    def _bank(self, name: str, dual: bool) -> dict:
        if name not in self.banks:
            comp = {"hd": np.zeros((self.B, self.T), dtype=np.int32)}
            comp["dual"] = np.zeros(self.T, dtype=np.int64) if dual else None
            comp["rail"] = np.zeros((self.B, self.T), dtype=np.int32) if dual else None
            self.banks[name] = comp
        return self.banks[name]

    def _add(self, arr: np.ndarray, off: int, contrib: np.ndarray) -> None:
        hi = min(self.T, off + contrib.shape[1])
        if hi > off:
            arr[:, off:hi] += contrib[:, : hi - off]

    def pipeline(self, name: str, off: int, vals: np.ndarray, width: int,
                 prev: np.ndarray, dual: bool = False) -> None:
        """vals: (B, E, n_regs); prev: (B, n_regs) register state before the
        first event (the reset value or the held previous-phase state)."""
        if vals.shape[1] == 0:
            return
        comp = self._bank(name, dual)
        mask = (1 << width) - 1
        low = mask >> 1 if dual else mask
        if self.kind == "hw":
            base = vals & low
        else:
            shifted = np.concatenate([prev[:, None, :], vals[:, :-1]], axis=1)
            base = (vals ^ shifted) & low
        self._add(comp["hd"], off, _popcount(base).sum(axis=2, dtype=np.int32))
        if dual:
            hi = min(self.T, off + vals.shape[1])
            comp["dual"][off:hi] += vals.shape[2]
            top = ((vals >> (width - 1)) & 1).sum(axis=2, dtype=np.int32)
            self._add(comp["rail"], off, top)

    def staggered(self, name: str, off: int, vals: np.ndarray, widths) -> None:
        """vals: (B, E, n_regs); register j's events land at off + j + e."""
        if vals.shape[1] == 0:
            return
        comp = self._bank(name, False)
        B, E, n = vals.shape
        prev = np.zeros((B, 1), dtype=vals.dtype)
        for j in range(n):
            mask = (1 << int(widths[j])) - 1
            col = vals[:, :, j]
            shifted = np.concatenate([prev, col[:, :-1]], axis=1)
            base = (col if self.kind == "hw" else col ^ shifted) & mask
            self._add(comp["hd"], off + j, _popcount(base).astype(np.int32))

    def once(self, name: str, off: int, vals: np.ndarray, width: int) -> None:
        """vals: (B, E); entry e written once at off + e from reset 0."""
        if vals.shape[1] == 0:
            return
        comp = self._bank(name, False)
        mask = (1 << width) - 1
        self._add(comp["hd"], off, _popcount(vals & mask).astype(np.int32))


def _rows_for(T: int, off: int, rows: int) -> int:
    return int(np.clip(T - off, 0, rows))


def window_limit(variant: str, top: Topology) -> int:
    """Longest first-layer window the batched kernels can produce: up to
    where the second layer's activity begins."""
    rows = top.layer_dims[1]
    if variant == "unmasked":
        return unmasked_layer_span(top, rows)
    return rows + top.depth + top.chain_width + 4


def window_components_unmasked(model: BnnModel, images: np.ndarray,
                               n_cycles: int, kind: str = "hd") -> WindowComponents:
    """First-layer leakage components for a batch of images, cycles
    [origin, origin + n_cycles)."""
    top = topology_for(model)
    top.check_model(model)
    if n_cycles > window_limit("unmasked", top):
        raise ValueError(
            f"window of {n_cycles} cycles reaches into the second layer "
            f"(limit {window_limit('unmasked', top)})"
        )
    B = images.shape[0]
    T = n_cycles
    w = model.weights[0]
    b = model.biases[0]
    rows = w.shape[0]
    acc = _WindowAccum(B, T, kind)

    e0 = _rows_for(T, 0, rows)
    sgn = sign_weights(w).astype(np.int32)
    leaves = _pad_leaves(images[:, None, :].astype(np.int64) * sgn[None, :e0, :],
                         top.n_leaves).astype(np.int32)
    prev0 = np.zeros((B, top.n_leaves), dtype=np.int32)
    acc.pipeline("leaf", 0, leaves, TREE_LEAF_BITS, prev0)
    levels = _tree_levels(leaves)
    biasv = None
    for s, vals in enumerate(levels, start=1):
        es = _rows_for(T, s, rows)
        acc.pipeline(f"stage{s}", s, vals[:, :es], top.stage_width(s),
                     np.zeros((B, vals.shape[2]), dtype=np.int32))
        if s == top.depth:
            biasv = vals[:, :, 0] + b[None, :e0]
    off = top.depth + 1
    eb = _rows_for(T, off, rows)
    acc.pipeline("bias", off, biasv[:, :eb, None], top.chain_width,
                 np.zeros((B, 1), dtype=np.int32))
    bits = (biasv > 0).astype(np.int32)
    ea = _rows_for(T, off + 1, rows)
    acc.pipeline("act", off + 1, bits[:, :ea, None], 1, np.zeros((B, 1), dtype=np.int32))
    acc.once("abuf", off + 2, bits[:, : _rows_for(T, off + 2, rows)], 1)

    aux = {"bias": biasv, "stage_values": {s: v for s, v in enumerate(levels, start=1)}}
    return WindowComponents("unmasked", attack_origin("unmasked", top), T, acc.banks, aux)


def window_components_masked(model: BnnModel, images: np.ndarray, mask_seeds: np.ndarray,
                             prng_on: bool, n_cycles: int, kind: str = "hd") -> WindowComponents:
    """Masked-value-phase leakage components for a batch of traces.

    ``mask_seeds`` gives one mask-stream seed per trace; the draw slots
    match run_masked's slot map, so a trace simulated here is
    cycle-for-cycle identical to the full run inside the window.
    """
    top = topology_for(model)
    top.check_model(model)
    if n_cycles > window_limit("masked", top):
        raise ValueError(
            f"window of {n_cycles} cycles reaches into the second layer "
            f"(limit {window_limit('masked', top)})"
        )
    B = images.shape[0]
    T = n_cycles
    W = top.chain_width
    w = model.weights[0]
    b = model.biases[0]
    rows = w.shape[0]
    acc = _WindowAccum(B, T, kind)

    if prng_on:
        masks = rng.stream_bits_multi(mask_seeds, 0, top.in_dim, 8).astype(np.int64)
    else:
        masks = np.zeros((B, top.in_dim), dtype=np.int64)
    masked_vals = images.astype(np.int64) - masks
    sgn = sign_weights(w).astype(np.int64)

    # Held phase-1 drain state: the last mask row's partials sit in the
    # tree when the masked-value phase begins.
    prev_leaf = _pad_leaves(sgn[None, rows - 1, :] * masks, top.n_leaves).astype(np.int32)
    prev_levels = _tree_levels(prev_leaf)

    e0 = _rows_for(T, 0, rows)
    leaves = _pad_leaves(masked_vals[:, None, :] * sgn[None, :e0, :],
                         top.n_leaves).astype(np.int32)
    acc.pipeline("leaf", 0, leaves, TREE_LEAF_BITS, prev_leaf, dual=True)
    levels = _tree_levels(leaves)
    biasv = None
    for s, vals in enumerate(levels, start=1):
        es = _rows_for(T, s, rows)
        acc.pipeline(f"stage{s}", s, vals[:, :es], top.stage_width(s),
                     prev_levels[s - 1], dual=True)
        if s == top.depth:
            biasv = vals[:, :, 0] + b[None, :e0]
    off = top.depth + 1
    eb = _rows_for(T, off, rows)
    acc.pipeline("bias", off, biasv[:, :eb, None], top.chain_width,
                 np.zeros((B, 1), dtype=np.int32), dual=True)

    cin = top.depth + 2
    ec = _rows_for(T, cin, rows)
    if ec:
        pbuf = masks @ sgn[:ec].T
        if prng_on:
            cbits = rng.stream_bits_multi(mask_seeds, top.in_dim, ec * W, 1)
            cbits = cbits.astype(np.int64).reshape(B, ec, W)
        else:
            cbits = np.zeros((B, ec, W), dtype=np.int64)
        regs = sign_chain_registers(pbuf, biasv[:, :ec].astype(np.int64), cbits, W)
        hold_widths = [W - j for j in range(W)]
        acc.staggered("achain.hold1", cin, regs["hold1"].astype(np.int32), hold_widths)
        acc.staggered("achain.hold2", cin, regs["hold2"].astype(np.int32), hold_widths)
        acc.staggered("achain.m", cin + 1, regs["m"].astype(np.int32), [1] * (W - 1))
        acc.staggered("achain.mc", cin + 1, regs["mc"].astype(np.int32), [1] * (W - 1))
        b1 = regs["b1"].astype(np.int32)
        b2 = regs["b2"].astype(np.int32)
        z1 = np.zeros((B, 1), dtype=np.int32)
        acc.pipeline("achain.b1", cin + W, b1[:, :, None], 1, z1)
        acc.pipeline("achain.b2", cin + W, b2[:, :, None], 1, z1.copy())
        acc.once("abuf1", cin + W + 1, b1[:, : _rows_for(T, cin + W + 1, rows)], 1)
        acc.once("abuf2", cin + W + 1, b2[:, : _rows_for(T, cin + W + 1, rows)], 1)

    aux = {"bias": biasv, "stage_values": {s: v for s, v in enumerate(levels, start=1)}}
    return WindowComponents("masked", attack_origin("masked", top), T, acc.banks, aux)
