"""Waveform containers, RIFF/WAVE file I/O, and band-limited resampling.

All audio entering the toolkit is funneled through Waveform: a mono float64
signal with a sample rate. File loading mixes multi-channel material down by
channel mean and scales 16-bit integer samples by 1/32768 so the nominal
range is [-1, 1]. Resampling is polyphase windowed-sinc interpolation with a
Kaiser window, 64 taps per polyphase branch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import gcd

import numpy as np
from scipy.signal import firwin, resample_poly

from .errors import (
    ConfigError,
    EmptyAudio,
    FormatError,
    NonFiniteValues,
    UnsupportedEncoding,
)

CANONICAL_RATE = 16000

_PCM = 1
_IEEE_FLOAT = 3

# Kaiser beta for ~80 dB stopband; taps per polyphase branch fixed at 64.
_KAISER_BETA = 8.6
_TAPS_PER_PHASE = 64


@dataclass
class Waveform:
    """Mono audio signal.

    samples: 1-D float64 array, finite, non-empty.
    sample_rate: Hz, positive.
    source_id: optional provenance label carried through processing.
    """

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigError(f"samples must be 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise EmptyAudio("waveform has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteValues("waveform contains NaN or infinity")
        if not isinstance(self.sample_rate, (int, np.integer)) or self.sample_rate < 1:
            raise ConfigError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameGrid:
    """Fixed framing scheme: frame_length >= hop_length >= 1, in samples."""

    frame_length: int
    hop_length: int

    def __post_init__(self):
        if self.hop_length < 1:
            raise ConfigError("hop_length must be >= 1")
        if self.frame_length < self.hop_length:
            raise ConfigError("frame_length must be >= hop_length")

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_length:
            return 0
        return 1 + (num_samples - self.frame_length) // self.hop_length

    def frame_starts(self, num_samples: int) -> np.ndarray:
        return np.arange(self.num_frames(num_samples)) * self.hop_length


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file.

    Supports 16-bit integer PCM and 32-bit IEEE float, any channel count
    (mixed down by channel mean). Float samples are clipped into [-1, 1].
    Raises FormatError for a broken container, UnsupportedEncoding for
    sample formats outside the two supported ones, EmptyAudio for a data
    chunk with no samples.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        raise FormatError("file too small for a RIFF header")
    if buf[0:4] != b"RIFF":
        raise FormatError("missing RIFF magic")
    if buf[8:12] != b"WAVE":
        raise FormatError("RIFF form type is not WAVE")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack("<I", buf[pos + 4:pos + 8])
        body_start = pos + 8
        if cid == b"fmt ":
            body = _read_exact_chunk(buf, body_start, size, "fmt chunk")
            if size < 16:
                raise FormatError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = _read_exact_chunk(buf, body_start, size, "data chunk")
        pos = body_start + size + (size & 1)  # chunks are word aligned

    if fmt is None:
        raise FormatError("no fmt chunk")
    if data is None:
        raise FormatError("no data chunk")

    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if channels < 1:
        raise FormatError("fmt chunk declares zero channels")
    if rate < 1:
        raise FormatError("fmt chunk declares non-positive sample rate")

    if audio_format == _PCM and bits == 16:
        raw = np.frombuffer(data[:len(data) - len(data) % 2], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == _IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(data[:len(data) - len(data) % 4], dtype="<f4")
        if not np.all(np.isfinite(raw)):
            raise NonFiniteValues(f"{path}: float samples contain NaN or infinity")
        samples = np.clip(raw.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedEncoding(
            f"unsupported sample format: code={audio_format} bits={bits}"
        )

    if samples.size == 0:
        raise EmptyAudio(f"{path}: data chunk holds no samples")
    if channels > 1:
        usable = samples.size - samples.size % channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1)
        if samples.size == 0:
            raise EmptyAudio(f"{path}: fewer samples than one frame of channels")

    return Waveform(samples, int(rate), source_id=str(path))


def _read_exact_chunk(buf: bytes, start: int, size: int, what: str) -> bytes:
    if start + size > len(buf):
        raise FormatError(f"file truncated inside {what}")
    return buf[start:start + size]


def save_wav(path, w: Waveform) -> None:
    """Write a 16-bit integer PCM mono WAV file. Samples are clipped."""
    scaled = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    data = scaled.tobytes()
    fmt_chunk = struct.pack(
        "<4sIHHIIHH", b"fmt ", 16, _PCM, 1, w.sample_rate,
        w.sample_rate * 2, 2, 16,
    )
    data_chunk = struct.pack("<4sI", b"data", len(data)) + data
    body = b"WAVE" + fmt_chunk + data_chunk
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Resample to target_rate with a Kaiser-windowed sinc polyphase filter.

    Equal rates return the input samples untouched (bitwise identical).
    Output length is within one sample of the ideal duration and the
    operation is linear in the input.
    """
    if not isinstance(target_rate, (int, np.integer)) or target_rate < 1:
        raise ConfigError(f"target_rate must be a positive integer, got {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == w.sample_rate:
        return Waveform(w.samples, w.sample_rate, source_id=w.source_id)
    g = gcd(w.sample_rate, target_rate)
    up = target_rate // g
    down = w.sample_rate // g
    max_rate = max(up, down)
    half = (_TAPS_PER_PHASE // 2) * max_rate
    taps = firwin(2 * half + 1, 1.0 / max_rate, window=("kaiser", _KAISER_BETA))
    out = resample_poly(w.samples, up, down, window=taps)
    return Waveform(out, target_rate, source_id=w.source_id)
