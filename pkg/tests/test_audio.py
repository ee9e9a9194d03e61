"""Waveform I/O and resampling tests.

The WAV bytes used as fixtures are assembled by hand with struct so the
reader is checked against an independently constructed byte layout, not
against the package's own writer.
"""

import struct

import numpy as np
import pytest

from voqa.audio import FrameGrid, Waveform, load_wav, resample, save_wav
from voqa.errors import (
    ConfigError,
    EmptyAudio,
    FormatError,
    NonFiniteValues,
    UnsupportedEncoding,
)


def build_wav(data: bytes, *, channels=1, rate=16000, bits=16, fmt=1,
              magic=b"RIFF", wave=b"WAVE", data_size=None) -> bytes:
    """Hand-rolled RIFF/WAVE container around raw sample bytes."""
    block_align = channels * bits // 8
    fmt_chunk = struct.pack(
        "<4sIHHIIHH", b"fmt ", 16, fmt, channels, rate,
        rate * block_align, block_align, bits,
    )
    if data_size is None:
        data_size = len(data)
    data_chunk = struct.pack("<4sI", b"data", data_size) + data
    body = wave + fmt_chunk + data_chunk
    return magic + struct.pack("<I", len(body)) + body


def pcm16(values) -> bytes:
    return np.asarray(values, dtype="<i2").tobytes()


# ---- loading ----

def test_load_pcm16_scaling(tmp_path):
    # 16384 / 32768 = 0.5 exactly; -32768 maps to -1.0
    p = tmp_path / "a.wav"
    p.write_bytes(build_wav(pcm16([0, 16384, -16384, 32767, -32768])))
    w = load_wav(p)
    assert w.sample_rate == 16000
    np.testing.assert_array_equal(
        w.samples, [0.0, 0.5, -0.5, 32767.0 / 32768.0, -1.0]
    )


def test_load_stereo_channel_mean(tmp_path):
    # interleaved L/R pairs; loader mixes to mono by channel mean
    left = np.array([8192, -8192, 16384], dtype=np.int64)
    right = np.array([16384, 8192, 16384], dtype=np.int64)
    interleaved = np.stack([left, right], axis=1).ravel()
    p = tmp_path / "st.wav"
    p.write_bytes(build_wav(pcm16(interleaved), channels=2))
    w = load_wav(p)
    expected = (left + right) / 2.0 / 32768.0
    np.testing.assert_allclose(w.samples, expected, rtol=0, atol=1e-15)


def test_load_float32(tmp_path):
    vals = np.array([0.25, -0.75, 1.0, -1.0], dtype="<f4")
    p = tmp_path / "f.wav"
    p.write_bytes(build_wav(vals.tobytes(), bits=32, fmt=3))
    w = load_wav(p)
    np.testing.assert_allclose(w.samples, vals.astype(np.float64))


def test_load_float32_clips_to_unit_range(tmp_path):
    vals = np.array([1.5, -2.0, 0.5], dtype="<f4")
    p = tmp_path / "f.wav"
    p.write_bytes(build_wav(vals.tobytes(), bits=32, fmt=3))
    w = load_wav(p)
    np.testing.assert_allclose(w.samples, [1.0, -1.0, 0.5])


def test_load_bad_magic(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(build_wav(pcm16([1, 2]), magic=b"JUNK"))
    with pytest.raises(FormatError):
        load_wav(p)


def test_load_not_wave(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(build_wav(pcm16([1, 2]), wave=b"AVI "))
    with pytest.raises(FormatError):
        load_wav(p)


def test_load_truncated_data(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(build_wav(pcm16([1, 2, 3]), data_size=4000))
    with pytest.raises(FormatError):
        load_wav(p)


def test_load_unsupported_bit_depth(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(build_wav(b"\x00" * 12, bits=24))
    with pytest.raises(UnsupportedEncoding):
        load_wav(p)


def test_load_unsupported_format_code(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(build_wav(pcm16([1, 2]), fmt=7))  # mu-law
    with pytest.raises(UnsupportedEncoding):
        load_wav(p)


def test_load_empty_data(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(build_wav(b""))
    with pytest.raises(EmptyAudio):
        load_wav(p)


def test_waveform_rejects_nan():
    with pytest.raises(NonFiniteValues):
        Waveform(np.array([0.0, np.nan]), 16000)


def test_waveform_rejects_empty():
    with pytest.raises(EmptyAudio):
        Waveform(np.array([]), 16000)


# ---- writing ----

def test_save_load_roundtrip_exact_on_grid(tmp_path):
    # values already on the int16 grid survive a write/read cycle exactly
    rng = np.random.default_rng(7)
    q = rng.integers(-32768, 32768, size=500).astype(np.float64) / 32768.0
    w = Waveform(q, 22050)
    p = tmp_path / "rt.wav"
    save_wav(p, w)
    back = load_wav(p)
    assert back.sample_rate == 22050
    np.testing.assert_array_equal(back.samples, q)


def test_save_clips_out_of_range(tmp_path):
    w = Waveform(np.array([2.0, -2.0]), 8000)
    p = tmp_path / "c.wav"
    save_wav(p, w)
    back = load_wav(p)
    np.testing.assert_array_equal(back.samples, [32767.0 / 32768.0, -1.0])


# ---- resampling ----

def test_resample_identity_is_bitwise():
    rng = np.random.default_rng(0)
    w = Waveform(rng.standard_normal(4000) * 0.1, 16000)
    out = resample(w, 16000)
    assert out.sample_rate == 16000
    assert np.array_equal(out.samples, w.samples)


def test_resample_sine_spectrum():
    # 200 Hz tone at 44.1 kHz downsampled to 16 kHz keeps its peak bin
    t = np.arange(44100) / 44100.0
    w = Waveform(np.sin(2 * np.pi * 200.0 * t), 44100)
    out = resample(w, 16000)
    assert abs(len(out.samples) - 16000) <= 1
    spectrum = np.abs(np.fft.rfft(out.samples))
    peak_hz = spectrum.argmax() * 16000 / len(out.samples)
    assert abs(peak_hz - 200.0) <= 16000 / len(out.samples)


def test_resample_duration_within_one_sample():
    rng = np.random.default_rng(3)
    for n, src, dst in [(44100, 44100, 16000), (44101, 44100, 16000),
                        (12345, 44100, 16000), (16000, 16000, 44100),
                        (8001, 8000, 16000)]:
        w = Waveform(rng.standard_normal(n) * 0.1, src)
        out = resample(w, dst)
        assert abs(len(out.samples) - n * dst / src) <= 1.0


def test_resample_linearity():
    rng = np.random.default_rng(11)
    a = rng.standard_normal(8000) * 0.2
    b = rng.standard_normal(8000) * 0.2
    lhs = resample(Waveform(2.5 * a + 0.3 * b, 44100), 16000).samples
    rhs = (2.5 * resample(Waveform(a, 44100), 16000).samples
           + 0.3 * resample(Waveform(b, 44100), 16000).samples)
    assert np.abs(lhs - rhs).max() < 1e-6


def test_resample_rejects_bad_rate():
    w = Waveform(np.zeros(100) + 0.1, 16000)
    with pytest.raises(ConfigError):
        resample(w, 0)


def test_load_resample_save_roundtrip_count(tmp_path):
    rng = np.random.default_rng(5)
    p = tmp_path / "in.wav"
    p.write_bytes(build_wav(pcm16(rng.integers(-3000, 3000, 44100)),
                            rate=44100))
    w = resample(load_wav(p), 16000)
    q = tmp_path / "out.wav"
    save_wav(q, w)
    back = load_wav(q)
    assert len(back.samples) == len(w.samples)
    assert back.sample_rate == 16000


# ---- frame grid ----

def test_frame_grid_counts():
    g = FrameGrid(frame_length=640, hop_length=160)
    assert g.num_frames(639) == 0
    assert g.num_frames(640) == 1
    assert g.num_frames(800) == 2
    assert g.num_frames(16000) == 1 + (16000 - 640) // 160


def test_frame_grid_validation():
    with pytest.raises(ConfigError):
        FrameGrid(frame_length=100, hop_length=200)
    with pytest.raises(ConfigError):
        FrameGrid(frame_length=100, hop_length=0)
