"""Writer for the VQES per-utterance embedding container.

Layout, all little-endian: magic "VQES", u32 version (1), u32
num_layers, u32 num_frames, u32 dim, the float32 values in
[layer][frame][dim] row-major order, u32 CRC32 of the payload bytes,
then an optional trailing tag block (u32 byte length + UTF-8) naming
the producing model. The consuming toolkit validates magic, shapes,
and CRC on every read, so this writer is deliberately standalone: the
two packages share a byte format, not code.
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ExportError

_MAGIC = b"VQES"
_VERSION = 1
_HEADER = struct.Struct("<IIII")  # version, num_layers, num_frames, dim


def write_vqes(path, values: np.ndarray, model_tag: str = "") -> None:
    """Write one stack file; bytes are a pure function of the inputs."""
    v = np.ascontiguousarray(values, dtype="<f4")
    if v.ndim != 3 or min(v.shape) < 1:
        raise ExportError(f"stack must be 3-D with positive dims, got {v.shape}")
    if not np.isfinite(v).all():
        raise ExportError("stack contains non-finite values")
    payload = v.tobytes()
    blob = _MAGIC + _HEADER.pack(_VERSION, *v.shape)
    blob += payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    if model_tag:
        enc = model_tag.encode("utf-8")
        blob += struct.pack("<I", len(enc)) + enc
    Path(path).write_bytes(blob)


def check_vqes(path) -> tuple[int, int, int]:
    """Cheap post-write self check; returns the stored (L, T, D)."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ExportError(f"{path}: bad magic after write")
    version, L, T, D = _HEADER.unpack_from(blob, 4)
    off = 4 + _HEADER.size
    payload = blob[off:off + 4 * L * T * D]
    (crc,) = struct.unpack_from("<I", blob, off + 4 * L * T * D)
    if version != _VERSION or zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ExportError(f"{path}: self check failed after write")
    return L, T, D
