"""Seeded synthetic signal and corpus generators.

Everything here is deterministic given its seed. The vowel generator
builds a harmonic-rich pulse-like waveform cycle by cycle with exact
(fractional-sample) period and amplitude sequences. Ground truth is
recorded at the level a peak-picking analyzer can observe: the intervals
between successive waveform peaks and the per-cycle maxima between them.
The injected perturbation sizes are calibrated so the local jitter and
shimmer of those recorded sequences hit the requested targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .audio import Waveform
from .errors import ConfigError


@dataclass
class VowelTruth:
    """Exact per-cycle ground truth recorded by the generator."""

    periods: np.ndarray      # intervals between successive waveform peaks (samples)
    amplitudes: np.ndarray   # realized max |sample| between successive peaks
    peak_positions: np.ndarray  # fractional sample position of each cycle's peak
    f0: float


def _local_ratio(values: np.ndarray) -> float:
    d = np.abs(np.diff(values))
    return float(d.mean() / values.mean()) if d.size else 0.0


def _calibrate_scale(base: np.ndarray, target: float) -> float:
    """Scale s such that the local ratio of (1 + s*base) matches target.

    The ratio is nearly linear in s; a few fixed-point passes land within
    1e-6 relative.
    """
    if target <= 0.0:
        return 0.0
    s = target / max(_local_ratio(1.0 + 0.01 * base), 1e-12) * 0.01
    for _ in range(4):
        got = _local_ratio(1.0 + s * base)
        if got <= 0:
            break
        s *= target / got
    return s


def _render(starts, periods, amps, a_h, n_total):
    """Harmonic cycle-by-cycle synthesis; the peak of cycle k sits at
    starts[k] + periods[k]/2 so per-cycle amplitude steps land near a low
    point of the waveform and the signal stays continuous."""
    h = np.arange(1, len(a_h) + 1)
    x = np.zeros(n_total)
    for k in range(len(periods)):
        n_a = int(np.ceil(starts[k]))
        n_b = min(int(np.ceil(starts[k + 1])), n_total)
        if n_b <= n_a:
            continue
        phase = (np.arange(n_a, n_b) - starts[k]) / periods[k]
        x[n_a:n_b] = amps[k] * np.sum(
            a_h[:, None] * np.cos(2 * np.pi * h[:, None] * (phase[None, :] - 0.5)),
            axis=0,
        )
    return x


def _peak_window_maxes(x, events):
    """Max |sample| between successive fractional event positions."""
    out = np.empty(len(events) - 1)
    for k in range(len(events) - 1):
        n_a = int(np.ceil(events[k]))
        n_b = min(int(np.ceil(events[k + 1])), len(x))
        out[k] = np.abs(x[n_a:n_b]).max() if n_b > n_a else 0.0
    return out


def synth_vowel(
    duration: float = 2.0,
    rate: int = 16000,
    f0: float = 120.0,
    jitter: float = 0.0,
    shimmer: float = 0.0,
    hnr_target_db: Optional[float] = None,
    n_harmonics: int = 6,
    rolloff: float = 0.7,
    amp: float = 0.3,
    pad: float = 0.1,
    seed: int = 0,
) -> tuple[Waveform, VowelTruth]:
    """Sustained synthetic vowel with controlled perturbations.

    jitter / shimmer are targets for the *local* perturbation ratios of
    the recorded peak-interval and peak-amplitude sequences, the
    quantities a mark-based analyzer measures. hnr_target_db, when given,
    adds white noise scaled to that harmonics-to-noise power ratio over
    the voiced span. pad seconds of silence surround the vowel.
    """
    rng = np.random.default_rng(seed)
    n_total = int(round(duration * rate))
    pad_n = int(round(pad * rate))
    T0 = rate / f0
    voiced_len = n_total - 2 * pad_n
    if voiced_len < 4 * T0:
        raise ConfigError("duration too short for the requested f0 and padding")

    n_cycles = int(voiced_len / T0) + 2
    eta = np.clip(rng.standard_normal(n_cycles), -2.5, 2.5)
    zeta = np.clip(rng.standard_normal(n_cycles), -2.5, 2.5)

    # Peak k sits mid-cycle, so the interval between peaks k and k+1 is the
    # mean of periods k and k+1. Calibrate the period perturbation against
    # that averaged sequence, which is what the analyzer can observe.
    eta_mid = 0.5 * (eta[:-1] + eta[1:])
    s_j = _calibrate_scale(eta_mid, jitter)
    periods = np.maximum(T0 * (1.0 + s_j * eta), 0.5 * T0)

    starts = pad_n + np.concatenate([[0.0], np.cumsum(periods)])
    keep = starts[1:] <= n_total - pad_n  # cycle must end inside the voiced span
    periods = periods[keep]
    zeta = zeta[:len(periods)]
    starts = starts[:len(periods) + 1]
    events = starts[:-1] + 0.5 * periods  # waveform peak positions

    h_amps = rolloff ** np.arange(1, n_harmonics + 1)
    h_amps /= h_amps.sum()  # continuous peak value is 1 before per-cycle scaling

    # The realized amplitude of the span between two peaks is a max over
    # neighboring scaled bumps, which attenuates the injected contrast, so
    # the amplitude perturbation is calibrated against the rendered signal.
    s_a = _calibrate_scale(zeta, shimmer)
    amps = np.maximum(1.0 + s_a * zeta, 0.05)
    x = _render(starts, periods, amps, h_amps, n_total)
    if shimmer > 0.0:
        for _ in range(8):
            got = _local_ratio(_peak_window_maxes(x, events))
            if got <= 0 or abs(got - shimmer) <= 1e-6 * shimmer:
                break
            s_a *= shimmer / got
            amps = np.maximum(1.0 + s_a * zeta, 0.05)
            x = _render(starts, periods, amps, h_amps, n_total)

    x *= amp / np.abs(x).max()
    realized = _peak_window_maxes(x, events)

    if hnr_target_db is not None:
        voiced = slice(pad_n, n_total - pad_n)
        p_sig = np.mean(x[voiced] ** 2)
        noise = rng.standard_normal(n_total)
        noise *= np.sqrt(p_sig * 10.0 ** (-hnr_target_db / 10.0))
        x = x + noise

    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak

    truth = VowelTruth(
        periods=np.diff(events),
        amplitudes=realized,
        peak_positions=events,
        f0=f0,
    )
    return Waveform(x, rate, source_id=f"synthvowel-{seed}"), truth


# ---- corpus generation ----

def synth_stack(
    rng: np.random.Generator,
    num_layers: int,
    num_frames: int,
    dim: int,
    signal: float = 0.0,
):
    """Random embedding stack whose deeper layers carry a speaker signal.

    Layer l mixes unit noise with `signal` scaled by l / (L - 1), so a
    learned layer weighting has something real to find.
    """
    from .stacks import EmbeddingStack

    base = rng.standard_normal((num_layers, num_frames, dim)) * 0.5
    if num_layers > 1:
        depth = np.linspace(0.0, 1.0, num_layers)[:, None, None]
    else:
        depth = np.ones((1, 1, 1))
    # stack files are binary32; keep the in-memory copy identical
    return EmbeddingStack(
        values=(base + 0.35 * signal * depth).astype(np.float32))


@dataclass
class CorpusSpec:
    """Shape of a synthetic rated corpus."""

    n_speakers: int = 240
    rate: int = 16000
    stack_layers: int = 4
    stack_dim: int = 32
    frames_lo: int = 20
    frames_hi: int = 60
    vowel_duration: float = 0.9
    sentence_piece: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError("need at least 2 speakers")
        if not 1 <= self.frames_lo <= self.frames_hi:
            raise ConfigError("frame bounds must satisfy 1 <= lo <= hi")


def _saturating(raw: float) -> float:
    """Linear-then-compressive map of a nonnegative severity drive."""
    return float(np.tanh(1.1 * raw) / np.tanh(1.1))


_CAPEV_MIX = {
    "severity": (1.00, 0.0),
    "roughness": (0.85, 2.0),
    "breathiness": (0.90, 2.0),
    "strain": (0.75, 2.5),
    "pitch": (0.60, 3.0),
    "loudness": (0.65, 3.0),
}
_GRBAS_MIX = {
    "grade": (1.00, 0.0),
    "roughness": (0.85, 0.08),
    "breathiness": (0.90, 0.08),
    "asthenia": (0.60, 0.10),
    "strain": (0.75, 0.10),
}


def synth_corpus(spec: CorpusSpec, out_dir) -> list:
    """Write a rated two-utterance-per-speaker corpus; returns manifest rows.

    Every speaker gets one sustained-vowel utterance (subset A) and one
    two-burst "sentence" utterance (subset S), plus one embedding stack
    file per utterance. Ratings are a noisy saturating function of the
    speaker's perturbation latents (jitter, shimmer, HNR) and the stack
    signal, identical across the speaker's utterances.
    """
    from pathlib import Path

    from .audio import save_wav
    from .stacks import write_stack

    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "stacks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rows = []
    for i in range(spec.n_speakers):
        sev = rng.uniform(0.0, 1.0)
        mix = rng.uniform(0.0, 1.0, size=3)
        sev_j, sev_s, sev_h = 0.7 * sev + 0.3 * mix
        f0 = rng.uniform(110.0, 220.0)
        m_s = rng.normal()
        jitter_t = 0.004 + 0.030 * sev_j
        shimmer_t = 0.020 + 0.100 * sev_s
        hnr_t = 25.0 - 17.0 * sev_h

        drive = (0.40 * sev_j + 0.20 * sev_s + 0.25 * sev_h
                 + 0.18 * np.tanh(m_s) + 0.03 * rng.normal())
        y = 100.0 * _saturating(max(drive, 0.0))
        scores = {}
        for name, (coef, noise) in _CAPEV_MIX.items():
            scores[f"capev_{name}"] = float(
                np.clip(coef * y + noise * rng.normal(), 0.0, 100.0))
        for name, (coef, noise) in _GRBAS_MIX.items():
            scores[f"grbas_{name}"] = float(
                np.clip(coef * (y / 100.0) * 3.0 + noise * rng.normal(),
                        0.0, 3.0))

        for u, subset in enumerate(("A", "S")):
            uid = f"spk{i:03d}_u{u}"
            jit = float(np.clip(jitter_t * (1 + 0.05 * rng.normal()),
                                0.001, 0.08))
            shim = float(np.clip(shimmer_t * (1 + 0.05 * rng.normal()),
                                 0.005, 0.25))
            hnr = float(np.clip(hnr_t + 0.5 * rng.normal(), 4.0, 35.0))
            f0_u = float(f0 * (1 + 0.02 * rng.normal()))
            vowel_seed = int(rng.integers(2 ** 31))
            if subset == "A":
                w, _ = synth_vowel(
                    duration=spec.vowel_duration, rate=spec.rate, f0=f0_u,
                    jitter=jit, shimmer=shim, hnr_target_db=hnr,
                    seed=vowel_seed,
                )
                x = w.samples
            else:
                w1, _ = synth_vowel(
                    duration=spec.sentence_piece, rate=spec.rate, f0=f0_u,
                    jitter=jit, shimmer=shim, hnr_target_db=hnr,
                    seed=vowel_seed,
                )
                w2, _ = synth_vowel(
                    duration=spec.sentence_piece, rate=spec.rate,
                    f0=f0_u * 1.05, jitter=jit, shimmer=shim,
                    hnr_target_db=hnr, seed=vowel_seed + 1,
                )
                gap = np.zeros(int(0.12 * spec.rate))
                x = np.concatenate([w1.samples, gap, w2.samples])
            save_wav(out / "audio" / f"{uid}.wav",
                     Waveform(x, spec.rate, source_id=uid))
            t_frames = int(rng.integers(spec.frames_lo, spec.frames_hi + 1))
            stack = synth_stack(rng, spec.stack_layers, t_frames,
                                spec.stack_dim, signal=m_s)
            write_stack(out / "stacks" / f"{uid}.vqes", stack)
            row = {
                "utterance_id": uid,
                "speaker_id": f"spk{i:03d}",
                "wav_path": f"audio/{uid}.wav",
                "vqes_path": f"stacks/{uid}.vqes",
                "subset": subset,
                "split": None,
                "noise_kind": None,
                "snr_db": None,
                "role": "clean",
            }
            row.update(scores)
            rows.append(row)
    return rows
