"""Shared fixtures: tiny randomly initialized encoders saved to local
directories plus a small WAV corpus with a manifest, so the whole suite
runs offline and in seconds."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import scipy.io.wavfile
import torch
import transformers

transformers.logging.set_verbosity_error()
transformers.logging.disable_progress_bar()

# full downstream-toolkit column set, so the exported manifest copy can be
# validated by the consumer as-is
MANIFEST_COLUMNS = (
    "utterance_id", "speaker_id", "wav_path", "vqes_path", "subset", "split",
    "capev_severity", "capev_roughness", "capev_breathiness", "capev_strain",
    "capev_pitch", "capev_loudness",
    "grbas_grade", "grbas_roughness", "grbas_breathiness", "grbas_asthenia",
    "grbas_strain", "noise_kind", "snr_db", "role",
)


def save_pcm16(path, rate, x):
    scipy.io.wavfile.write(path, rate, np.round(x * 32767).astype(np.int16))


def make_clip(seed, n, rate, f0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate
    x = 0.25 * np.sin(2 * np.pi * f0 * t) + 0.1 * np.sin(2 * np.pi * 2.3 * f0 * t)
    x = x + 0.02 * rng.standard_normal(n)
    return 0.5 * x / np.max(np.abs(x))


@dataclass
class Corpus:
    root: Path
    manifest: Path
    uids: list
    n_samples: dict      # uid -> samples as written
    rates: dict          # uid -> rate as written


# (uid, speaker, rate, n_samples, f0); u04 is shorter and u05 needs resampling
_ROWS = (
    ("u01", "spk_a", 16000, 16000, 120.0),
    ("u02", "spk_a", 16000, 16000, 140.0),
    ("u03", "spk_b", 16000, 16000, 180.0),
    ("u04", "spk_b", 16000, 8000, 200.0),
    ("u05", "spk_c", 48000, 48000, 160.0),
)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    (root / "wav").mkdir()
    rows = []
    n_samples, rates = {}, {}
    for i, (uid, spk, rate, n, f0) in enumerate(_ROWS):
        rel = f"wav/{uid}.wav"
        save_pcm16(root / rel, rate, make_clip(100 + i, n, rate, f0))
        n_samples[uid], rates[uid] = n, rate
        row = dict.fromkeys(MANIFEST_COLUMNS, "")
        row.update(utterance_id=uid, speaker_id=spk, wav_path=rel, subset="S")
        if i < 3:
            row.update(capev_severity=30.0 + 10 * i, capev_roughness=20.0,
                       capev_breathiness=15.0, capev_strain=10.0,
                       capev_pitch=5.0, capev_loudness=5.0)
        rows.append(row)
    manifest = root / "corpus.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return Corpus(root=root, manifest=manifest, uids=[r[0] for r in _ROWS],
                  n_samples=n_samples, rates=rates)


@pytest.fixture(scope="session")
def tiny_wavlm(tmp_path_factory):
    from transformers import Wav2Vec2FeatureExtractor, WavLMConfig, WavLMModel

    d = tmp_path_factory.mktemp("models") / "wavlm-tiny"
    torch.manual_seed(7)
    cfg = WavLMConfig(hidden_size=32, num_hidden_layers=3,
                      num_attention_heads=2, intermediate_size=64,
                      conv_dim=(16, 16, 16), conv_stride=(5, 8, 8),
                      conv_kernel=(10, 3, 3), num_feat_extract_layers=3)
    WavLMModel(cfg).save_pretrained(d)
    Wav2Vec2FeatureExtractor(do_normalize=True).save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def tiny_hubert(tmp_path_factory):
    from transformers import HubertConfig, HubertModel

    d = tmp_path_factory.mktemp("models") / "hubert-tiny"
    torch.manual_seed(11)
    cfg = HubertConfig(hidden_size=32, num_hidden_layers=2,
                       num_attention_heads=2, intermediate_size=64,
                       conv_dim=(16, 16, 16), conv_stride=(5, 8, 8),
                       conv_kernel=(10, 3, 3), num_feat_extract_layers=3)
    # no feature extractor saved: the family default must kick in
    HubertModel(cfg).save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def tiny_whisper(tmp_path_factory):
    from transformers import (WhisperConfig, WhisperFeatureExtractor,
                              WhisperModel)

    d = tmp_path_factory.mktemp("models") / "whisper-tiny"
    torch.manual_seed(13)
    cfg = WhisperConfig(d_model=24, encoder_layers=2,
                        encoder_attention_heads=2, decoder_layers=1,
                        decoder_attention_heads=2, encoder_ffn_dim=48,
                        decoder_ffn_dim=48, num_mel_bins=80,
                        max_source_positions=100, max_target_positions=50,
                        vocab_size=100, pad_token_id=0, bos_token_id=1,
                        eos_token_id=2, decoder_start_token_id=3,
                        suppress_tokens=[], begin_suppress_tokens=[])
    WhisperModel(cfg).save_pretrained(d)
    WhisperFeatureExtractor(feature_size=80, chunk_length=2).save_pretrained(d)
    return d
