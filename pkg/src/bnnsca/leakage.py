"""Synthetic power traces from register activity.

One sample per clock cycle.  A sample is the sum of the hamming distances
of all included ordinary registers for that cycle, plus, for each
dual-rail register, a constant 1 per transition and an imbalance term
epsilon * (true-rail value), plus white Gaussian noise.  With epsilon = 0
the dual-rail contribution carries no data at all; a nonzero epsilon
models physical rail asymmetry.

Trace file format ("SCAT"): magic, u16 version=1, u32 n_traces,
u32 n_samples, u8 dtype tag (0 = little-endian float32), row-major sample
payload, then a metadata block of u32 line count followed by
length-prefixed (u32) UTF-8 "key=value" lines.  Per-trace known inputs
live in a sibling file `<path>.inputs` as raw bytes in trace order;
optional per-trace partition labels live in `<path>.labels`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .datapath import CycleTrace, WindowComponents

_TRACE_MAGIC = b"SCAT"
_TRACE_VERSION = 1
_DTYPE_F32LE = 0


class TraceFormatError(ValueError):
    """Raised for corrupt, truncated or mismatched trace files."""


@dataclass(frozen=True)
class LeakageModel:
    """How register activity turns into power samples.

    kind: "hd" (hamming distance of each transition) or "hw" (hamming
    weight of each new value).  ``include`` selects ordinary register
    banks by name prefix ("" matches everything); ``include_dual``
    independently selects dual-rail banks and defaults to ``include``.
    """

    kind: str = "hd"
    epsilon: float = 0.0
    sigma: float = 0.0
    include: tuple = ("",)
    include_dual: tuple = None

    def __post_init__(self):
        if self.kind not in ("hd", "hw"):
            raise ValueError(f"unknown leakage kind {self.kind!r}")
        if self.epsilon < 0 or self.sigma < 0:
            raise ValueError("epsilon and sigma must be non-negative")

    @property
    def dual_filter(self) -> tuple:
        return self.include if self.include_dual is None else self.include_dual


def hamming_distance(prev, curr):
    """popcount(prev XOR curr) for scalars or arrays (non-negative values)."""
    x = np.bitwise_xor(np.asarray(prev, dtype=np.uint64), np.asarray(curr, dtype=np.uint64))
    counts = np.bitwise_count(x)
    return int(counts) if counts.ndim == 0 else counts.astype(np.int64)


def _noise(noise_seed: int, trace_index: int, n: int, sigma: float,
           start_cycle: int = 0) -> np.ndarray:
    """White Gaussian noise, a pure function of (seed, trace, cycle).

    Box-Muller over the deterministic word stream, two words per cycle,
    so any window of a trace reproduces exactly regardless of how the
    trace was chunked or truncated.
    """
    if sigma == 0.0:
        return np.zeros(n)
    seed = rng.derive_seed(noise_seed, trace_index)
    words = rng.stream_words(seed, 2 * start_cycle, 2 * n).reshape(n, 2)
    u1 = (words[:, 0].astype(np.float64) + 1.0) * 2.0**-64  # in (0, 1]
    u2 = words[:, 1].astype(np.float64) * 2.0**-64
    return sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def synthesize(cycle_trace: CycleTrace, model: LeakageModel, noise_seed: int,
               trace_index: int = 0) -> np.ndarray:
    """One power trace (float32, one sample per cycle) for one run."""
    hd, dual_n, rail = cycle_trace.leakage_components(
        include=model.include, include_dual=model.dual_filter, kind=model.kind
    )
    samples = hd.astype(np.float64) + dual_n + model.epsilon * rail
    samples += _noise(noise_seed, trace_index, samples.size, model.sigma)
    return samples.astype(np.float32)


def synthesize_batch(components: WindowComponents, model: LeakageModel,
                     noise_seed: int, trace_indices) -> np.ndarray:
    """Traces for a batch from precomputed window components; bit-identical
    to per-trace synthesize over the same window."""
    raw = components.total(model.include, model.dual_filter, model.epsilon)
    out = np.empty_like(raw)
    for row, idx in enumerate(trace_indices):
        out[row] = raw[row] + _noise(noise_seed, int(idx), raw.shape[1],
                                     model.sigma, start_cycle=components.origin)
    return out.astype(np.float32)


@dataclass
class TraceSet:
    """Attacker-visible campaign data: samples plus per-trace known inputs."""

    samples: np.ndarray          # (n_traces, n_samples) float32
    inputs: np.ndarray           # (n_traces, input_dim) uint8
    meta: dict = field(default_factory=dict)
    labels: np.ndarray = None    # optional per-trace partition bits

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.uint8)
        if self.samples.shape[0] != self.inputs.shape[0]:
            raise ValueError("samples and inputs disagree on trace count")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (self.samples.shape[0],):
                raise ValueError("labels must be one byte per trace")

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def save_traces(traces: TraceSet, path) -> None:
    path = Path(path)
    meta = dict(traces.meta)
    meta["input_dim"] = str(traces.inputs.shape[1])
    meta["has_labels"] = "1" if traces.labels is not None else "0"
    lines = [f"{k}={v}" for k, v in sorted(meta.items())]
    with open(path, "wb") as fh:
        fh.write(_TRACE_MAGIC)
        fh.write(struct.pack("<HIIB", _TRACE_VERSION, traces.n_traces,
                             traces.n_samples, _DTYPE_F32LE))
        fh.write(traces.samples.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(lines)))
        for line in lines:
            raw = line.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    Path(str(path) + ".inputs").write_bytes(traces.inputs.tobytes())
    if traces.labels is not None:
        Path(str(path) + ".labels").write_bytes(traces.labels.tobytes())


def load_traces(path) -> TraceSet:
    path = Path(path)
    data = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise TraceFormatError(f"truncated trace file: wanted {n} bytes at {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != _TRACE_MAGIC:
        raise TraceFormatError("bad magic; not a trace file")
    version, n_traces, n_samples, dtype_tag = struct.unpack("<HIIB", take(11))
    if version != _TRACE_VERSION:
        raise TraceFormatError(f"unsupported trace version {version}")
    if dtype_tag != _DTYPE_F32LE:
        raise TraceFormatError(f"unsupported sample dtype tag {dtype_tag}")
    payload = take(4 * n_traces * n_samples)
    samples = np.frombuffer(payload, dtype="<f4").reshape(n_traces, n_samples)
    (n_lines,) = struct.unpack("<I", take(4))
    meta = {}
    for _ in range(n_lines):
        (ln,) = struct.unpack("<I", take(4))
        key, _, value = take(ln).decode("utf-8").partition("=")
        meta[key] = value
    if off != len(data):
        raise TraceFormatError(f"{len(data) - off} trailing bytes in trace file")
    input_dim = int(meta.get("input_dim", "0"))
    raw_inputs = Path(str(path) + ".inputs").read_bytes()
    if input_dim <= 0 or len(raw_inputs) != n_traces * input_dim:
        raise TraceFormatError("input sidecar does not match trace shape")
    inputs = np.frombuffer(raw_inputs, dtype=np.uint8).reshape(n_traces, input_dim)
    labels = None
    if meta.get("has_labels") == "1":
        raw_labels = Path(str(path) + ".labels").read_bytes()
        if len(raw_labels) != n_traces:
            raise TraceFormatError("label sidecar does not match trace count")
        labels = np.frombuffer(raw_labels, dtype=np.uint8)
    return TraceSet(samples=samples.copy(), inputs=inputs.copy(), meta=meta,
                    labels=None if labels is None else labels.copy())
