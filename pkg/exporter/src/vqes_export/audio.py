"""Audio loading for export: mono float64 at the encoder's sample rate.

Multi-channel input is averaged down to mono. Resampling uses a
polyphase filter; equal rates pass samples through untouched.
"""

from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ExportError

_INT_SCALE = {
    np.dtype(np.uint8): (128.0, 128.0),
    np.dtype(np.int16): (0.0, 32768.0),
    np.dtype(np.int32): (0.0, 2147483648.0),
}


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file, returning (mono float64 samples, sample rate)."""
    path = Path(path)
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise ExportError(f"audio file not found: {path}")
    except ValueError as exc:
        raise ExportError(f"unreadable WAV file {path}: {exc}")
    x = np.asarray(data)
    if x.dtype in _INT_SCALE:
        offset, scale = _INT_SCALE[x.dtype]
        x = (x.astype(np.float64) - offset) / scale
    else:
        x = x.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(rate)


def resample(x: np.ndarray, rate: int, target_rate: int) -> np.ndarray:
    """Polyphase resample; identical samples when rates already match."""
    if rate == target_rate:
        return x
    g = np.gcd(rate, target_rate)
    return scipy.signal.resample_poly(x, target_rate // g, rate // g)


def load_for_model(path, target_rate: int) -> np.ndarray:
    x, rate = load_wav(path)
    return resample(x, rate, target_rate)
