"""Noise generation and exact-SNR mixing for robustness experiments.

Three generated colors (white, pink with 1/f power, brown with 1/f^2) plus
external files looped to length. Because the published robustness grids
also use recorded babble, cocktail-party, infant-cry, and laughter noise,
seeded multi-tone surrogates for those four ship with the toolkit so the
full protocol runs without third-party assets; a real recording can be
substituted by giving the spec a file path.

Mixing measures power over the full utterance and scales the noise so the
clean-to-noise ratio hits the target exactly; the sum is peak-normalized
only when it would clip, and both components scale together so the SNR
survives normalization. Every emitted file's noise is derived from
(seed, utterance id, noise label, SNR), so regeneration is reproducible
file-by-file in any order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import Waveform, load_wav, resample, save_wav
from .errors import ConfigError, DegenerateSignal, FileError

STANDIN_NAMES = ("babble", "cocktail", "cry", "laughter")

_KINDS = ("white", "pink", "brown", "external")
_SEEN_SNRS = (-5.0, 0.0, 5.0, 10.0)
_UNSEEN_SNRS = (0.0, 5.0)


@dataclass(frozen=True)
class NoiseSpec:
    """What noise to make: a generated color or an external source."""

    kind: str
    name: Optional[str] = None
    path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.kind == "external" and self.path is None:
            if self.name not in STANDIN_NAMES:
                raise ConfigError(
                    "external noise needs a file path or one of the shipped "
                    f"surrogate names {STANDIN_NAMES}"
                )

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.path:
            return Path(self.path).stem
        return self.kind


@dataclass(frozen=True)
class MixPlan:
    """Target SNR and the role the mixture plays in the protocol."""

    snr_db: Optional[float]
    role: str

    def __post_init__(self):
        if self.role not in ("train_seen", "test_seen", "test_unseen", "clean"):
            raise ConfigError(f"unknown mix role {self.role!r}")
        if self.role in ("train_seen", "test_seen") and self.snr_db not in _SEEN_SNRS:
            raise ConfigError(
                f"seen-condition SNR must be one of {_SEEN_SNRS}, got {self.snr_db}"
            )
        if self.role == "test_unseen" and self.snr_db not in _UNSEEN_SNRS:
            raise ConfigError(
                f"unseen-condition SNR must be one of {_UNSEEN_SNRS}, "
                f"got {self.snr_db}"
            )


@dataclass(frozen=True)
class ProtocolEntry:
    spec: NoiseSpec
    plan: MixPlan


@dataclass
class MixResult:
    """A mixture plus the gains that produced it."""

    waveform: Waveform
    noise_gain: float
    peak_scale: float


def _rng_for(*parts) -> np.random.Generator:
    """Seed a generator from a mix of ints and strings, order-sensitive."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode("utf-8")))
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(words)


def _rms_normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _colored(n: int, rng: np.random.Generator, power_exponent: float) -> np.ndarray:
    """Gaussian noise shaped to PSD proportional to f**power_exponent."""
    x = rng.standard_normal(n)
    if power_exponent == 0.0:
        return _rms_normalize(x)
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(n)
    gain = np.zeros_like(f)
    gain[1:] = f[1:] ** (power_exponent / 2.0)
    return _rms_normalize(np.fft.irfft(spec * gain, n))


def _standin(name: str, n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    """Multi-tone chatter surrogate for a recorded noise category."""
    band, tones, env_hz = {
        "babble": ((120.0, 3500.0), 24, 3.0),
        "cocktail": ((80.0, 6000.0), 40, 2.0),
        "cry": ((350.0, 3200.0), 8, 1.0),
        "laughter": ((200.0, 2800.0), 12, 4.5),
    }[name]
    t = np.arange(n) / rate
    out = np.zeros(n)
    for _ in range(tones):
        f0 = rng.uniform(*band)
        phase = rng.uniform(0, 2 * np.pi)
        vibrato = rng.uniform(0.0, 20.0) if name == "cry" else 0.0
        carrier = np.sin(
            2 * np.pi * f0 * t
            + phase
            + (vibrato / max(env_hz, 1e-6)) * np.sin(2 * np.pi * env_hz * t)
        )
        env_phase = rng.uniform(0, 2 * np.pi)
        env = 0.5 * (1.0 + np.sin(2 * np.pi * env_hz * t + env_phase))
        if name == "laughter":
            env = env ** 2  # pulsier bursts
        out += rng.uniform(0.3, 1.0) * env * carrier
    out += 0.05 * rng.standard_normal(n)
    return _rms_normalize(out)


def _generate(spec: NoiseSpec, num_samples: int, rate: int,
              rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "white":
        return _colored(num_samples, rng, 0.0)
    if spec.kind == "pink":
        return _colored(num_samples, rng, -1.0)
    if spec.kind == "brown":
        x = np.cumsum(rng.standard_normal(num_samples))
        x -= x.mean()
        return _rms_normalize(x)
    if spec.path is not None:
        try:
            w = load_wav(spec.path)
        except OSError as exc:
            raise FileError(f"cannot read noise file {spec.path}: {exc}") from exc
        if w.sample_rate != rate:
            w = resample(w, rate)
        return np.resize(w.samples, num_samples)
    return _standin(spec.name, num_samples, rate, rng)


def generate_noise(spec: NoiseSpec, num_samples: int, rate: int) -> Waveform:
    """Materialize a noise waveform of exactly num_samples at rate."""
    if num_samples < 1:
        raise ConfigError("num_samples must be >= 1")
    rng = _rng_for(spec.seed, spec.label)
    return Waveform(
        samples=_generate(spec, num_samples, rate, rng),
        sample_rate=rate,
        source_id=f"noise:{spec.label}",
    )


def noise_for_utterance(
    spec: NoiseSpec,
    utterance_id: str,
    snr_db: float,
    num_samples: int,
    rate: int,
    seed: int,
) -> Waveform:
    """The exact noise an augmented file uses.

    The stream is keyed by (seed, utterance, label, SNR), so files can be
    regenerated independently and in any order.
    """
    rng = _rng_for(seed, utterance_id, spec.label, round(snr_db * 100))
    return Waveform(
        samples=_generate(spec, num_samples, rate, rng),
        sample_rate=rate,
        source_id=f"noise:{spec.label}:{utterance_id}",
    )


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> MixResult:
    """Scale noise to the target clean-to-noise power ratio and add it."""
    if clean.sample_rate != noise.sample_rate:
        raise ConfigError(
            f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}"
        )
    p_clean = float(np.mean(clean.samples ** 2))
    if p_clean <= 0.0:
        raise DegenerateSignal("clean signal has zero power")
    n = np.resize(noise.samples, clean.samples.size)
    p_noise = float(np.mean(n ** 2))
    if p_noise <= 0.0:
        raise DegenerateSignal("noise signal has zero power")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples + gain * n
    peak = float(np.max(np.abs(mixed)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    return MixResult(
        waveform=Waveform(samples=mixed * scale,
                          sample_rate=clean.sample_rate,
                          source_id=clean.source_id),
        noise_gain=gain,
        peak_scale=scale,
    )


def default_noise_protocol() -> list:
    """The full robustness grid: seen noises at four SNRs, unseen at two."""
    seen = [
        NoiseSpec(kind="white"),
        NoiseSpec(kind="pink"),
        NoiseSpec(kind="external", name="babble"),
        NoiseSpec(kind="external", name="cocktail"),
    ]
    unseen = [
        NoiseSpec(kind="brown"),
        NoiseSpec(kind="external", name="cry"),
        NoiseSpec(kind="external", name="laughter"),
    ]
    entries = [
        ProtocolEntry(spec=s, plan=MixPlan(snr_db=snr, role="train_seen"))
        for s in seen
        for snr in _SEEN_SNRS
    ]
    entries += [
        ProtocolEntry(spec=s, plan=MixPlan(snr_db=snr, role="test_unseen"))
        for s in unseen
        for snr in _UNSEEN_SNRS
    ]
    return entries


def build_augmented_set(rows, protocol, out_dir, base_dir, seed: int) -> list:
    """Write every (noise, SNR) variant of each clean row; return new rows.

    The clean rows pass through unchanged. Augmented rows reuse the
    speaker and score columns, point at the new file, and drop any
    embedding path (noisy audio needs re-exported embeddings).
    """
    base = Path(base_dir)
    out_dir = Path(out_dir)
    out = []
    for row in rows:
        out.append(dict(row))
        if row.get("role") not in (None, "", "clean"):
            continue
        if not protocol:
            continue
        out_dir.mkdir(parents=True, exist_ok=True)
        clean = load_wav(base / row["wav_path"])
        uid = row["utterance_id"]
        for entry in protocol:
            snr = entry.plan.snr_db
            noise = noise_for_utterance(
                entry.spec, uid, snr, clean.samples.size,
                clean.sample_rate, seed,
            )
            res = mix_at_snr(clean, noise, snr)
            fname = f"{uid}__{entry.spec.label}__{snr:g}.wav"
            save_wav(out_dir / fname, res.waveform)
            new = dict(row)
            new["utterance_id"] = f"{uid}__{entry.spec.label}__{snr:g}"
            new["wav_path"] = str((out_dir / fname).relative_to(base))
            new["vqes_path"] = None
            new["noise_kind"] = entry.spec.label
            new["snr_db"] = snr
            new["role"] = entry.plan.role
            out.append(new)
    return out
