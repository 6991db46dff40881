"""Functional reference implementation of the binarized network.

This module is the source of truth for what the hardware simulators must
compute.  Other code paths (the register-level simulators, the attacker's
pipeline slice) are checked against it, never the other way around.

Conventions
-----------
* A weight bit 1 means +1, a weight bit 0 means -1.
* First-layer inputs are raw 8-bit pixel values in [0, 255]; they enter
  the weighted sum as plain integers, not as +/-1.
* Hidden activations are single bits; bit b stands for the value 2b - 1.
* The activation function maps a sum x to 1 for x > 0 and 0 for x <= 0.
* The output layer keeps raw integer scores; the label is the index of
  the maximum score with ties broken toward the lowest index.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import rng

#: Full-scale network topology: input width, three hidden layers, classes.
LAYER_DIMS = (784, 1024, 1024, 1024, 10)

#: Biases are stored as 16-bit signed integers in the model file.
BIAS_WIDTH = 16

_MODEL_MAGIC = b"BNNM"
_MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a model file is truncated, corrupt or inconsistent."""


@dataclass(frozen=True)
class BnnModel:
    """Binary weight matrices plus integer biases.

    Parameters
    ----------
    weights : tuple of np.ndarray
        One uint8 matrix per layer, shape (out_dim, in_dim), entries in
        {0, 1}.
    biases : tuple of np.ndarray
        One int32 vector per layer, shape (out_dim,).
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up per layer")
        if len(self.weights) < 2:
            raise ValueError("need at least one hidden layer and an output layer")
        prev_out = None
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError("layer shapes inconsistent")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(
                    f"weight matrix width {w.shape[1]} does not match previous layer {prev_out}"
                )
            prev_out = w.shape[0]
            if w.max(initial=0) > 1 or w.min(initial=0) < 0:
                raise ValueError("weight bits must be 0 or 1")
            bound = 1 << (BIAS_WIDTH - 1)
            if b.size and (b.max() >= bound or b.min() < -bound):
                raise ValueError(f"bias magnitude exceeds {BIAS_WIDTH}-bit signed range")

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class ClassResult:
    """Classification outcome: winning label plus raw output scores."""

    label: int
    scores: tuple

    def __post_init__(self):
        if self.label != int(np.argmax(self.scores)):
            raise ValueError("label must be the lowest index of the maximum score")


def sign_weights(bits: np.ndarray) -> np.ndarray:
    """Map weight bits {0, 1} to signs {-1, +1} as int32."""
    return bits.astype(np.int32) * 2 - 1


def check_image(image: np.ndarray, in_dim: int = LAYER_DIMS[0]) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != (in_dim,):
        raise ValueError(f"image must have exactly {in_dim} entries, got {image.shape}")
    if image.min(initial=0) < 0 or image.max(initial=0) > 255:
        raise ValueError("pixels must lie in [0, 255]")
    return image.astype(np.uint8)


def weighted_sum(inputs, weights, bias: int) -> int:
    """Signed weighted sum: sum over i of (+x_i if w_i else -x_i), plus bias.

    Exact integer arithmetic; no modular wraparound.
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    weights = np.asarray(weights)
    if inputs.shape != weights.shape:
        raise ValueError(
            f"inputs and weights must have equal length, got {inputs.shape} vs {weights.shape}"
        )
    signs = weights.astype(np.int64) * 2 - 1
    return int(np.dot(signs, inputs)) + int(bias)


def sign_activation(total: int) -> int:
    """Binarize a pre-activation sum: 1 for x > 0, 0 for x <= 0."""
    return 1 if total > 0 else 0


def infer_reference(model: BnnModel, image: np.ndarray) -> ClassResult:
    """Forward pass over all layers; deterministic and total.

    Hidden layers binarize their sums; the output layer returns raw
    integer scores.
    """
    image = check_image(image, model.layer_dims[0])
    acts = image.astype(np.int64)
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        sums = sign_weights(w).astype(np.int64) @ acts + b
        acts = (sums > 0).astype(np.int64) * 2 - 1
    w, b = model.weights[-1], model.biases[-1]
    scores = sign_weights(w).astype(np.int64) @ acts + b
    label = int(np.argmax(scores))
    return ClassResult(label=label, scores=tuple(int(s) for s in scores))


def generate_model(seed: int, layer_dims=LAYER_DIMS, bias_bound: int = 256) -> BnnModel:
    """Deterministic pseudo-random model; a pure function of the seed.

    Biases are uniform in [-bias_bound, bias_bound).  bias_bound must fit
    the 16-bit bias field.
    """
    if bias_bound < 1 or bias_bound > 1 << (BIAS_WIDTH - 1):
        raise ValueError("bias_bound out of range")
    weights = []
    biases = []
    for layer, (n_in, n_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        wseed = rng.derive_seed(seed, 2 * layer)
        bseed = rng.derive_seed(seed, 2 * layer + 1)
        bits = rng.stream_bits(wseed, 0, n_in * n_out, 1).astype(np.uint8)
        weights.append(bits.reshape(n_out, n_in))
        draws = rng.stream_words(bseed, 0, n_out)
        biases.append((draws % np.uint64(2 * bias_bound)).astype(np.int32) - bias_bound)
    return BnnModel(weights=tuple(weights), biases=tuple(biases))


def _write_model(model: BnnModel, fh) -> None:
    fh.write(_MODEL_MAGIC)
    fh.write(struct.pack("<HH", _MODEL_VERSION, model.n_layers))
    for w, b in zip(model.weights, model.biases):
        # File layout is input-major: rows = fan-in, cols = neurons, so
        # bit (r, c) is the weight from input r into neuron c.
        rows, cols = w.shape[1], w.shape[0]
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.packbits(w.T.reshape(-1)).tobytes())
        fh.write(b.astype("<i2").tobytes())


def save_model(model: BnnModel, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def model_bytes(model: BnnModel) -> bytes:
    buf = io.BytesIO()
    _write_model(model, buf)
    return buf.getvalue()


def model_hash(model: BnnModel) -> str:
    """Stable content hash of the serialized model."""
    return sha256(model_bytes(model)).hexdigest()


def load_model(path) -> BnnModel:
    data = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise ModelFormatError(f"truncated model file: wanted {n} bytes at offset {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != _MODEL_MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    version, n_layers = struct.unpack("<HH", take(4))
    if version != _MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if n_layers < 2 or n_layers > 64:
        raise ModelFormatError(f"implausible layer count {n_layers}")
    weights = []
    biases = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", take(8))
        if rows == 0 or cols == 0 or rows * cols > (1 << 28):
            raise ModelFormatError(f"implausible layer dimensions {rows}x{cols}")
        nbytes = (rows * cols + 7) // 8
        bits = np.unpackbits(np.frombuffer(take(nbytes), dtype=np.uint8))[: rows * cols]
        weights.append(bits.reshape(rows, cols).T.astype(np.uint8))
        biases.append(np.frombuffer(take(2 * cols), dtype="<i2").astype(np.int32))
    if off != len(data):
        raise ModelFormatError(f"{len(data) - off} trailing bytes after model payload")
    try:
        return BnnModel(weights=tuple(weights), biases=tuple(biases))
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent model contents: {exc}") from exc


def save_image(image: np.ndarray, path) -> None:
    Path(path).write_bytes(check_image(image, image.shape[0]).tobytes())


def load_image(path, in_dim: int = LAYER_DIMS[0]) -> np.ndarray:
    """Read an image as raw bytes, or as CSV when the path ends in .csv."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        values = np.loadtxt(path, delimiter=",", dtype=np.int64).reshape(-1)
    else:
        values = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if values.size != in_dim:
        raise ValueError(f"image file holds {values.size} values, expected {in_dim}")
    return check_image(values, in_dim)


def generate_image(seed: int, in_dim: int = LAYER_DIMS[0]) -> np.ndarray:
    """Uniform random image, a pure function of the seed."""
    return rng.stream_bits(seed, 0, in_dim, 8).astype(np.uint8)
