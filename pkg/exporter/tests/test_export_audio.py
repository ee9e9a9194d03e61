"""Audio loading: integer scaling, downmix, and resampling."""

import numpy as np
import pytest
import scipy.io.wavfile

from vqes_export import ExportError
from vqes_export.audio import load_for_model, load_wav, resample


def test_pcm16_scaling_is_exact(tmp_path):
    path = tmp_path / "a.wav"
    scipy.io.wavfile.write(path, 16000,
                           np.array([0, 16384, -32768, 32767], dtype=np.int16))
    x, rate = load_wav(path)
    assert rate == 16000
    np.testing.assert_allclose(x, [0.0, 0.5, -1.0, 32767 / 32768], atol=0)
    assert x.dtype == np.float64


def test_stereo_downmixes_after_scaling(tmp_path):
    path = tmp_path / "a.wav"
    data = np.array([[16384, -16384], [32767, 32767]], dtype=np.int16)
    scipy.io.wavfile.write(path, 16000, data)
    x, _ = load_wav(path)
    np.testing.assert_allclose(x, [0.0, 32767 / 32768])
    assert np.max(np.abs(x)) <= 1.0


def test_float_wav_passes_through(tmp_path):
    path = tmp_path / "a.wav"
    ref = np.linspace(-0.5, 0.5, 64).astype(np.float32)
    scipy.io.wavfile.write(path, 16000, ref)
    x, _ = load_wav(path)
    np.testing.assert_array_equal(x, ref.astype(np.float64))


def test_resample_preserves_duration_and_content():
    rate, target = 48000, 16000
    t = np.arange(48000) / rate
    x = np.sin(2 * np.pi * 400 * t)
    y = resample(x, rate, target)
    assert len(y) == 16000
    want = np.sin(2 * np.pi * 400 * np.arange(16000) / target)
    # ignore the filter's edge transients
    np.testing.assert_allclose(y[200:-200], want[200:-200], atol=1e-3)


def test_equal_rates_pass_samples_through_untouched():
    x = np.random.default_rng(1).standard_normal(1000)
    assert resample(x, 16000, 16000) is x


def test_load_for_model_resamples(tmp_path):
    path = tmp_path / "a.wav"
    scipy.io.wavfile.write(
        path, 48000,
        (0.4 * np.sin(2 * np.pi * 300 * np.arange(48000) / 48000) * 32767
         ).astype(np.int16))
    x = load_for_model(path, 16000)
    assert len(x) == 16000


def test_unreadable_audio_raises(tmp_path):
    with pytest.raises(ExportError):
        load_wav(tmp_path / "missing.wav")
    garbage = tmp_path / "not_audio.wav"
    garbage.write_text("hello")
    with pytest.raises(ExportError):
        load_wav(garbage)
