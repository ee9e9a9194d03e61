"""Acoustic low-level descriptors: pitch, jitter, shimmer, HNR, CPP.

Pitch is tracked by per-frame normalized autocorrelation over a bounded lag
band with parabolic peak refinement. Glottal-cycle marks are then placed by
greedy peak picking inside each voiced run, and the perturbation measures
are computed from those marks:

  jitter (local):  mean |T_k - T_{k-1}| / mean T_k over consecutive cycle
                   durations, never differencing across an unvoiced gap
  shimmer (local): the same ratio over per-cycle peak amplitudes
  HNR:             10*log10(r / (1 - r)) with r the autocorrelation peak at
                   the detected period, averaged over voiced frames
  CPP:             framewise cepstral peak prominence, peak minus a
                   least-squares trend line over the period quefrency band

All measures operate on the mono float64 Waveform type from voqa.audio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal.windows import blackmanharris
from sklearn.base import BaseEstimator, TransformerMixin

from .audio import Waveform
from .errors import (
    ConfigError,
    DegenerateAmplitude,
    InsufficientCycles,
    NoVoicedFrames,
    ShapeError,
    TooShort,
)

_R_CLAMP = 1e-6  # keeps 10*log10(r/(1-r)) finite at both ends

_OCTAVE_COST = 0.05  # per octave of lag, subtracted from candidate scores

_CPP_FRAME = 4096  # halved down to _CPP_MIN for short inputs
_CPP_MIN = 1024
_CPP_FLOOR_DB = -90.0  # spectral floor relative to the frame's peak magnitude


@dataclass(frozen=True)
class PitchConfig:
    """Analysis settings for pitch tracking and voiced-frame decisions.

    The frame must hold at least three periods of the lowest trackable
    frequency, so frame_seconds * f0_min >= 3.
    """

    f0_min: float = 75.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.45
    silence_threshold: float = 0.01
    frame_seconds: float = 0.040
    hop_seconds: float = 0.010

    def __post_init__(self):
        if not (0.0 < self.f0_min < self.f0_max):
            raise ConfigError(f"need 0 < f0_min < f0_max, got {self.f0_min}, {self.f0_max}")
        if self.frame_seconds * self.f0_min < 3.0 - 1e-9:
            raise ConfigError(
                f"frame of {self.frame_seconds}s holds fewer than 3 periods at f0_min={self.f0_min}"
            )
        if not (0.0 < self.voicing_threshold < 1.0):
            raise ConfigError("voicing_threshold must lie in (0, 1)")
        if self.silence_threshold <= 0.0:
            raise ConfigError("silence_threshold must be positive")
        if self.hop_seconds <= 0.0 or self.frame_seconds < self.hop_seconds:
            raise ConfigError("need frame_seconds >= hop_seconds > 0")


@dataclass
class PitchTrack:
    """Frame-level voicing decisions plus cycle marks for one waveform.

    frame_times: frame center times in seconds.
    f0:          Hz per frame, 0.0 where unvoiced.
    voiced:      boolean mask per frame.
    mark_runs:   one float array of cycle-mark sample positions per voiced
                 run; positions are fractional after parabolic refinement
                 and strictly increasing within and across runs.
    """

    frame_times: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray
    mark_runs: list
    sample_rate: int
    config: PitchConfig

    def __post_init__(self):
        n = len(self.frame_times)
        if not (len(self.f0) == len(self.voiced) == n):
            raise ShapeError("frame arrays disagree in length")
        last = -np.inf
        for run in self.mark_runs:
            if len(run) and not (np.diff(run) > 0).all():
                raise ShapeError("marks within a run must strictly increase")
            if len(run):
                if run[0] <= last:
                    raise ShapeError("mark runs must be time ordered")
                last = run[-1]

    @property
    def period_marks(self) -> np.ndarray:
        if not self.mark_runs:
            return np.zeros(0)
        return np.concatenate(self.mark_runs)


@dataclass
class LLDVector:
    """One utterance's descriptor set.

    When `missing` is set the measurement failed (no voiced material, too
    few cycles) and the numeric fields are NaN; downstream consumers impute
    from training statistics and carry the flag forward.
    """

    jitter_local: float
    shimmer_local: float
    hnr_db: float
    cpp_db: Optional[float]
    num_cycles: int
    missing: bool = False

    def __post_init__(self):
        if self.missing:
            return
        if not (np.isfinite(self.jitter_local) and self.jitter_local >= 0):
            raise ConfigError(f"jitter must be finite and >= 0, got {self.jitter_local}")
        if not (np.isfinite(self.shimmer_local) and self.shimmer_local >= 0):
            raise ConfigError(f"shimmer must be finite and >= 0, got {self.shimmer_local}")
        if not np.isfinite(self.hnr_db):
            raise ConfigError("hnr_db must be finite")
        if self.cpp_db is not None and not np.isfinite(self.cpp_db):
            raise ConfigError("cpp_db must be finite when present")
        if self.num_cycles < 0:
            raise ConfigError("num_cycles must be >= 0")

    @classmethod
    def missing_marker(cls) -> "LLDVector":
        return cls(np.nan, np.nan, np.nan, None, 0, missing=True)

    def as_array(self, include_cpp: bool = False) -> np.ndarray:
        """Descriptor values in fused order (jitter, shimmer, hnr[, cpp])."""
        vals = [self.jitter_local, self.shimmer_local, self.hnr_db]
        if include_cpp:
            if self.cpp_db is None and not self.missing:
                raise ConfigError("cpp requested but was not computed for this vector")
            vals.append(np.nan if self.cpp_db is None else self.cpp_db)
        return np.asarray(vals, dtype=np.float64)


def _frame_analysis(x: np.ndarray, rate: int, cfg: PitchConfig):
    """Per-frame (center time, fractional peak lag, peak NCC, rms).

    The normalized cross-correlation at lag tau compares the first
    flen - tau samples of a mean-removed frame against the last, which
    keeps r in [-1, 1] and equal to 1 for exact periodicity.
    """
    flen = int(round(cfg.frame_seconds * rate))
    hop = int(round(cfg.hop_seconds * rate))
    if x.size < flen:
        raise TooShort(f"need at least {flen} samples, got {x.size}")

    frames = sliding_window_view(x, flen)[::hop].astype(np.float64)
    frames = frames - frames.mean(axis=1, keepdims=True)
    n_frames = frames.shape[0]
    rms = np.sqrt((frames ** 2).mean(axis=1))

    lag_lo = max(2, int(np.floor(rate / cfg.f0_max)))
    lag_hi = int(np.ceil(rate / cfg.f0_min))
    if lag_hi + 2 >= flen:
        raise ConfigError("frame too short for the requested f0_min")

    lags = np.arange(lag_lo - 1, lag_hi + 2)
    sq = np.concatenate(
        [np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1
    )
    total = sq[:, flen]
    R = np.empty((n_frames, len(lags)))
    for j, tau in enumerate(lags):
        num = np.einsum("ij,ij->i", frames[:, : flen - tau], frames[:, tau:])
        den = np.sqrt(sq[:, flen - tau] * (total - sq[:, tau]))
        R[:, j] = np.where(den > 1e-30, num / np.maximum(den, 1e-30), 0.0)

    rows = np.arange(n_frames)
    inner = R[:, 1:-1]
    # Candidate lags are local maxima of r; a small log-lag cost breaks the
    # tie between a period and its multiples, which otherwise correlate
    # equally well and cause octave-down errors.
    is_peak = (inner >= R[:, :-2]) & (inner >= R[:, 2:])
    cost = _OCTAVE_COST * np.log2(lags[1:-1] / float(lag_lo))
    score = np.where(is_peak, inner - cost[None, :], -np.inf)
    k = 1 + np.argmax(score, axis=1)
    no_peak = ~is_peak.any(axis=1)
    if no_peak.any():
        k[no_peak] = 1 + np.argmax(inner[no_peak], axis=1)
    rm, r0, rp = R[rows, k - 1], R[rows, k], R[rows, k + 1]
    curv = rm - 2.0 * r0 + rp
    safe = np.abs(curv) > 1e-30
    delta = np.where(safe, 0.5 * (rm - rp) / np.where(safe, curv, 1.0), 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    lag_frac = lags[k] + delta
    r_peak = np.clip(r0 - 0.25 * (rm - rp) * delta, -1.0, 1.0)

    starts = np.arange(n_frames) * hop
    times = (starts + 0.5 * flen) / rate
    return times, lag_frac, r_peak, rms


def _fold_octaves(lag_frac: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Fold per-frame octave outliers onto each voiced run's dominant lag.

    Signals whose period is a fractional number of samples can correlate
    slightly better at twice the period in individual frames; those frames
    are folded back using the run's lower-quartile lag as the reference.
    Assumes f0 within a run stays within half an octave of that quartile,
    which holds for sustained phonation.
    """
    lag = lag_frac.copy()
    for i0, i1 in _voiced_runs(voiced):
        seg = lag[i0:i1 + 1]
        canon = np.percentile(seg, 25)
        ratio = seg / canon
        seg[np.abs(ratio - 2.0) < 0.25] *= 0.5
        seg[np.abs(ratio - 0.5) < 0.0625] *= 2.0
        lag[i0:i1 + 1] = seg
    return lag


def track_pitch(w: Waveform, config: Optional[PitchConfig] = None) -> PitchTrack:
    """Track f0 and place one cycle mark per detected glottal cycle.

    A frame is voiced iff its peak in-band autocorrelation exceeds the
    voicing threshold and its RMS exceeds the silence threshold. Octave
    outliers are folded onto each voiced run's dominant lag. Marks are
    found by walking each voiced run peak to peak, searching the window
    [previous + 0.8 T, previous + 1.3 T] with T the locally interpolated
    period. Raises TooShort for inputs under one analysis frame.
    """
    cfg = config or PitchConfig()
    rate = w.sample_rate
    times, lag_frac, r_peak, rms = _frame_analysis(w.samples, rate, cfg)
    voiced = (r_peak > cfg.voicing_threshold) & (rms > cfg.silence_threshold)
    f0 = np.zeros_like(times)
    if voiced.any():
        lag_frac = _fold_octaves(lag_frac, voiced)
        f0[voiced] = np.clip(rate / lag_frac[voiced], cfg.f0_min, cfg.f0_max)
    mark_runs = _pick_marks(w.samples, rate, voiced, f0, cfg)
    return PitchTrack(times, f0, voiced, mark_runs, rate, cfg)


def _voiced_runs(voiced: np.ndarray):
    """Contiguous [first, last] frame index pairs of voiced stretches."""
    idx = np.flatnonzero(voiced)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts, ends))


def _refine_peak(y: np.ndarray, m: int) -> float:
    """Sub-sample peak position via a least-squares parabola.

    Five points when available (less phase-dependent bias than the
    three-point form), otherwise three, otherwise the integer position.
    """
    if 2 <= m <= len(y) - 3:
        seg = y[m - 2:m + 3]
        o = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        a = seg @ (o ** 2 - 2.0) / 14.0
        b = seg @ o / 10.0
        if abs(a) < 1e-30:
            return float(m)
        return float(m + np.clip(-b / (2.0 * a), -0.5, 0.5))
    if m <= 0 or m >= len(y) - 1:
        return float(m)
    curv = y[m - 1] - 2.0 * y[m] + y[m + 1]
    if abs(curv) < 1e-30:
        return float(m)
    delta = 0.5 * (y[m - 1] - y[m + 1]) / curv
    return float(m + np.clip(delta, -0.5, 0.5))


def _pick_marks(x, rate, voiced, f0, cfg):
    flen = int(round(cfg.frame_seconds * rate))
    hop = int(round(cfg.hop_seconds * rate))
    runs = _voiced_runs(voiced)
    out = []
    for r, (i0, i1) in enumerate(runs):
        span_start = int(i0 * hop)
        span_end = int(min(i1 * hop + flen, len(x)))
        if r + 1 < len(runs):  # never reach into the next voiced run's span
            span_end = min(span_end, int(runs[r + 1][0] * hop))
        if span_end - span_start < 4:
            continue
        seg = x[span_start:span_end]
        pol = 1.0 if seg.max() >= -seg.min() else -1.0
        y = pol * x
        centers = np.arange(i0, i1 + 1) * hop + 0.5 * flen
        periods = rate / f0[i0:i1 + 1]

        def period_at(s):
            return float(np.interp(s, centers, periods))

        # Anchor on the run's strongest peak and walk outward both ways so
        # low-level onset/offset samples inside the voiced span never seed
        # the chain. A window whose best peak falls below a tenth of the
        # anchor ends the walk on that side.
        g = span_start + int(np.argmax(y[span_start:span_end]))
        floor = 0.1 * y[g]
        if floor <= 0.0:
            continue
        fwd = [_refine_peak(y, g)]
        while True:
            T = period_at(fwd[-1])
            lo = int(np.ceil(fwd[-1] + 0.8 * T))
            hi = min(int(np.floor(fwd[-1] + 1.3 * T)) + 1, span_end)
            if lo >= span_end or hi - lo < 2:
                break
            m = lo + int(np.argmax(y[lo:hi]))
            if y[m] < floor:
                break
            fwd.append(_refine_peak(y, m))
        bwd = []
        while True:
            prev = bwd[-1] if bwd else fwd[0]
            T = period_at(prev)
            lo = max(int(np.ceil(prev - 1.3 * T)), span_start)
            hi = int(np.floor(prev - 0.8 * T)) + 1
            if hi <= span_start or hi - lo < 2:
                break
            m = lo + int(np.argmax(y[lo:hi]))
            if y[m] < floor:
                break
            bwd.append(_refine_peak(y, m))
        marks = bwd[::-1] + fwd
        if len(marks) >= 2:
            out.append(np.asarray(marks))
    return out


def jitter_local(track: PitchTrack) -> float:
    """Local jitter: mean absolute consecutive-period difference divided by
    the mean period, pooled over voiced runs. Differences never straddle an
    unvoiced gap. Raises InsufficientCycles when no run holds two
    consecutive periods.
    """
    periods, diffs = [], []
    for run in track.mark_runs:
        if len(run) < 2:
            continue
        T = np.diff(run)
        periods.append(T)
        if len(T) >= 2:
            diffs.append(np.abs(np.diff(T)))
    if not diffs:
        raise InsufficientCycles("no voiced run with two consecutive periods")
    all_T = np.concatenate(periods)
    all_d = np.concatenate(diffs)
    return float(all_d.mean() / all_T.mean())


def shimmer_local(w: Waveform, track: PitchTrack) -> float:
    """Local shimmer over per-cycle peak amplitudes (max |sample| between
    consecutive marks), with the same pooling and gap rules as jitter.
    """
    mag = np.abs(w.samples)
    amps, diffs = [], []
    for run in track.mark_runs:
        if len(run) < 2:
            continue
        edges = np.ceil(run).astype(int)
        A = np.array([
            mag[edges[k]:edges[k + 1]].max()
            for k in range(len(edges) - 1)
            if edges[k + 1] > edges[k]
        ])
        if A.size == 0:
            continue
        amps.append(A)
        if A.size >= 2:
            diffs.append(np.abs(np.diff(A)))
    if not diffs:
        raise InsufficientCycles("no voiced run with two consecutive cycles")
    all_A = np.concatenate(amps)
    if all_A.max() <= 0.0:
        raise DegenerateAmplitude("all cycle amplitudes are zero")
    return float(np.concatenate(diffs).mean() / all_A.mean())


def hnr_db(w: Waveform, track: PitchTrack) -> float:
    """Harmonics-to-noise ratio in dB, mean over voiced frames.

    Per frame, r is the autocorrelation peak at the detected period,
    clamped into [1e-6, 1 - 1e-6] so the ratio stays finite; the frame
    value is 10*log10(r / (1 - r)).
    """
    times, _lag, r_peak, _rms = _frame_analysis(w.samples, w.sample_rate, track.config)
    if len(times) != len(track.voiced):
        raise ShapeError("track does not match this waveform's framing")
    if not track.voiced.any():
        raise NoVoicedFrames("no voiced frames to average")
    r = np.clip(r_peak[track.voiced], _R_CLAMP, 1.0 - _R_CLAMP)
    return float(np.mean(10.0 * np.log10(r / (1.0 - r))))


def cpp_frames(w: Waveform, config: Optional[PitchConfig] = None):
    """Framewise cepstral peak prominence.

    Returns (values_db, peak_quefrency_seconds) per frame. Each analysis
    frame's log-magnitude spectrum is estimated by averaging windowed,
    half-overlapped segments of the frame, which suppresses the random
    cepstral fluctuations of aperiodic signals while leaving a periodic
    signal's rahmonic intact. The magnitudes are floored relative to the
    frame's spectral peak before the dB log, the real cepstrum is taken,
    and the peak in the quefrency band [1/f0_max, 1/f0_min] is measured
    against a least-squares line fit over that band.
    """
    cfg = config or PitchConfig()
    x = w.samples
    rate = w.sample_rate
    if x.size < _CPP_MIN:
        raise TooShort(f"need at least {_CPP_MIN} samples, got {x.size}")
    flen = _CPP_FRAME
    while flen > x.size:
        flen //= 2
    sub = flen // 2
    hop = flen // 4
    win = blackmanharris(sub)
    floor = 10.0 ** (_CPP_FLOOR_DB / 20.0)

    qlo = int(np.ceil(rate / cfg.f0_max))
    qhi = min(int(np.floor(rate / cfg.f0_min)), sub // 2 - 1)
    q = np.arange(qlo, qhi + 1, dtype=np.float64)
    qc = q - q.mean()
    sqq = (qc ** 2).sum()

    frames = sliding_window_view(x, flen)[::hop]
    values = np.empty(frames.shape[0])
    peak_q = np.empty(frames.shape[0])
    for i, fr in enumerate(frames):
        segs = sliding_window_view(fr, sub)[:: sub // 2] * win
        mag = np.abs(np.fft.rfft(segs, axis=1)).mean(axis=0)
        top = mag.max()
        if top <= 0.0:  # silent frame: flat spectrum, zero prominence
            values[i] = 0.0
            peak_q[i] = qlo / rate
            continue
        log_mag = 20.0 * np.log10(np.maximum(mag, top * floor))
        band = np.fft.irfft(log_mag)[qlo:qhi + 1]
        k = int(np.argmax(band))
        slope = band @ qc / sqq
        intercept = band.mean() - slope * q.mean()
        values[i] = band[k] - (intercept + slope * q[k])
        peak_q[i] = (qlo + k) / rate
    return values, peak_q


def cpp_db(w: Waveform, config: Optional[PitchConfig] = None) -> float:
    """Utterance-level CPP: mean of the framewise values."""
    values, _ = cpp_frames(w, config)
    return float(values.mean())


def trim_to_central_voiced_span(track: PitchTrack, fraction: float = 0.05) -> PitchTrack:
    """Drop the first and last `fraction` of the voiced span.

    Used for sustained-vowel inputs so onset and offset irregularities do
    not contaminate the perturbation measures. Frames and marks outside
    the central window are removed; a track with no voiced frames is
    returned unchanged.
    """
    v = track.voiced
    if not v.any():
        return track
    tv = track.frame_times[v]
    span = tv[-1] - tv[0]
    lo = tv[0] + fraction * span
    hi = tv[-1] - fraction * span
    keep = v & (track.frame_times >= lo - 1e-12) & (track.frame_times <= hi + 1e-12)
    f0 = np.where(keep, track.f0, 0.0)
    rate = track.sample_rate
    runs = []
    for run in track.mark_runs:
        t = run / rate
        sel = run[(t >= lo) & (t <= hi)]
        if len(sel) >= 2:
            runs.append(sel)
    return PitchTrack(track.frame_times, f0, keep, runs, rate, track.config)


def extract_llds(
    w: Waveform,
    subset: str = "vowel",
    include_cpp: bool = False,
    config: Optional[PitchConfig] = None,
) -> LLDVector:
    """Full descriptor extraction for one utterance.

    subset "vowel" trims 5% off each end of the voiced span first; subset
    "sentence" measures over all voiced material as found. Measurement
    failures (nothing voiced, too few cycles, silent cycles) produce a
    missing marker rather than an exception.
    """
    if subset not in ("vowel", "sentence"):
        raise ConfigError(f"subset must be 'vowel' or 'sentence', got {subset!r}")
    cfg = config or PitchConfig()
    try:
        track = track_pitch(w, cfg)
        if subset == "vowel":
            track = trim_to_central_voiced_span(track, 0.05)
        j = jitter_local(track)
        s = shimmer_local(w, track)
        h = hnr_db(w, track)
        c = cpp_db(w, cfg) if include_cpp else None
    except (InsufficientCycles, DegenerateAmplitude, NoVoicedFrames):
        return LLDVector.missing_marker()
    n_cycles = sum(max(len(r) - 1, 0) for r in track.mark_runs)
    return LLDVector(j, s, h, c, n_cycles, missing=False)


class LLDExtractor(TransformerMixin, BaseEstimator):
    """Transformer wrapper: list of Waveforms in, descriptor matrix out.

    Rows for utterances whose measurement failed are NaN; pair with the
    records() method when the missing flags are needed.
    """

    def __init__(self, subset: str = "vowel", include_cpp: bool = False,
                 config: Optional[PitchConfig] = None):
        self.subset = subset
        self.include_cpp = include_cpp
        self.config = config

    def fit(self, X, y=None):
        return self

    def records(self, X) -> list:
        return [
            extract_llds(w, subset=self.subset, include_cpp=self.include_cpp,
                         config=self.config)
            for w in X
        ]

    def transform(self, X) -> np.ndarray:
        rows = [r.as_array(include_cpp=self.include_cpp) for r in self.records(X)]
        return np.stack(rows) if rows else np.zeros((0, 4 if self.include_cpp else 3))
