"""On-disk embedding layer stacks and learnable layer aggregation.

A stack holds the hidden states of every layer of an upstream speech
foundation model for one utterance, as a (layers, frames, dim) tensor.
Stacks are produced offline, stored one file per utterance in the VQES
binary format, and combined at training time by a softmax-weighted sum
over layers whose logits are learnable.

VQES layout, all little-endian: magic "VQES", u32 version (1), u32
num_layers, u32 num_frames, u32 dim, num_layers*num_frames*dim float32
values in [layer][frame][dim] row-major order, u32 CRC32 of the payload
bytes, then an optional trailing tag block (u32 byte length + UTF-8)
naming the producing model.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptStack, FormatError, NonFiniteValues, ShapeError

_MAGIC = b"VQES"
_VERSION = 1
_HEADER = struct.Struct("<IIII")  # version, num_layers, num_frames, dim


@dataclass(frozen=True)
class EmbeddingStack:
    """Immutable per-utterance layer stack, validated on construction."""

    values: np.ndarray
    model_tag: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"stack must be 3-D (layers, frames, dim), got {v.shape}")
        if min(v.shape) < 1:
            raise ShapeError(f"every stack dimension must be >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteValues("stack contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a 1-D vector."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass(frozen=True)
class LayerWeights:
    """Learnable per-layer logits; weights are their softmax."""

    logits: np.ndarray

    def __post_init__(self):
        lg = np.asarray(self.logits, dtype=np.float64)
        if lg.ndim != 1 or lg.size < 1:
            raise ShapeError("logits must be a non-empty 1-D vector")
        if not np.isfinite(lg).all():
            raise NonFiniteValues("logits contain non-finite values")
        object.__setattr__(self, "logits", lg)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)


def read_stack(path) -> EmbeddingStack:
    """Load and validate one VQES file."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a VQES file")
    if len(blob) < 4 + _HEADER.size:
        raise CorruptStack(f"{path}: truncated header")
    version, L, T, D = _HEADER.unpack_from(blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if min(L, T, D) < 1:
        raise CorruptStack(f"{path}: invalid dimensions ({L}, {T}, {D})")
    count = L * T * D
    off = 4 + _HEADER.size
    need = off + 4 * count + 4
    if len(blob) < need:
        raise CorruptStack(f"{path}: payload truncated")
    payload = blob[off:off + 4 * count]
    (crc,) = struct.unpack_from("<I", blob, off + 4 * count)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptStack(f"{path}: payload CRC mismatch")
    tag = ""
    rest = blob[need:]
    if rest:
        if len(rest) < 4:
            raise CorruptStack(f"{path}: malformed trailing tag block")
        (tag_len,) = struct.unpack_from("<I", rest, 0)
        if len(rest) != 4 + tag_len:
            raise CorruptStack(f"{path}: malformed trailing tag block")
        try:
            tag = rest[4:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptStack(f"{path}: tag block is not UTF-8") from exc
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.isfinite(values).all():
        raise NonFiniteValues(f"{path}: payload contains non-finite values")
    return EmbeddingStack(values.reshape(L, T, D), model_tag=tag)


def write_stack(path, stack: EmbeddingStack) -> None:
    """Write one VQES file; output bytes are a pure function of the stack."""
    payload = stack.values.astype("<f4").tobytes()
    blob = _MAGIC + _HEADER.pack(
        _VERSION, stack.num_layers, stack.num_frames, stack.dim
    )
    blob += payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    if stack.model_tag:
        enc = stack.model_tag.encode("utf-8")
        blob += struct.pack("<I", len(enc)) + enc
    Path(path).write_bytes(blob)


def aggregate(stack: EmbeddingStack, lw: LayerWeights) -> np.ndarray:
    """Softmax-weighted sum over layers: (T, D) frame features."""
    if lw.logits.size != stack.num_layers:
        raise ShapeError(
            f"{lw.logits.size} logits for a {stack.num_layers}-layer stack"
        )
    return np.tensordot(lw.weights, stack.values, axes=(0, 0))


def aggregate_grad_logits(
    stack: EmbeddingStack, lw: LayerWeights, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of sum(upstream * aggregate(stack, lw)) w.r.t. the logits.

    With weights w = softmax(logits) and per-layer inner products
    s_j = sum(upstream * values[j]), the chain rule through the softmax
    gives d/dlogit_j = w_j * (s_j - sum_l w_l s_l).
    """
    if lw.logits.size != stack.num_layers:
        raise ShapeError(
            f"{lw.logits.size} logits for a {stack.num_layers}-layer stack"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (stack.num_frames, stack.dim):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match "
            f"({stack.num_frames}, {stack.dim})"
        )
    w = lw.weights
    s = np.tensordot(stack.values, upstream, axes=([1, 2], [0, 1]))
    return w * (s - w @ s)


def last_layer(stack: EmbeddingStack) -> np.ndarray:
    """The final layer's (T, D) frame features."""
    return stack.values[-1]
