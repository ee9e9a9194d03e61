"""Loading pretrained speech encoders and pulling their layer stacks.

Three families are supported: wavlm and hubert consume raw 16 kHz
waveforms; whisper consumes log-mel features and contributes encoder
hidden states only. In every case the exported stack is the model
library's full hidden-state tuple, so layer 0 is the embedding or
convolutional front-end output and num_layers is one more than the
transformer depth.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import AudioTooShort, ExportConfigError, ModelResolutionError

_WAVEFORM_FAMILIES = ("wavlm", "hubert")
_FAMILIES = _WAVEFORM_FAMILIES + ("whisper",)


@dataclass
class LoadedEncoder:
    """One resolved checkpoint, ready for batched inference."""

    model_type: str
    model: torch.nn.Module          # full model or the whisper encoder
    feature_extractor: object
    num_layers: int                 # hidden-state tuple length
    dim: int
    frame_hop_s: float
    device: torch.device
    tag: str


def _resolve_device(device: str) -> torch.device:
    try:
        dev = torch.device(device)
    except RuntimeError as exc:
        raise ExportConfigError(f"bad device {device!r}: {exc}")
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ExportConfigError("device 'cuda' requested but not available")
    return dev


def _fallback_extractor(config):
    """Family-default preprocessing when the checkpoint ships none."""
    from transformers import Wav2Vec2FeatureExtractor, WhisperFeatureExtractor

    if config.model_type == "whisper":
        # chunk length must land exactly on the encoder's position budget
        seconds = config.max_source_positions * 2 * 160 / 16000
        return WhisperFeatureExtractor(feature_size=config.num_mel_bins,
                                       chunk_length=int(seconds))
    # wavlm checkpoints normalize input; classic hubert ones do not
    return Wav2Vec2FeatureExtractor(do_normalize=config.model_type == "wavlm")


def load_encoder(model_name: str, device: str = "cpu") -> LoadedEncoder:
    """Resolve a checkpoint (hub name or local directory) for export."""
    import transformers
    from transformers import AutoConfig, AutoFeatureExtractor, AutoModel

    transformers.logging.set_verbosity_error()
    transformers.logging.disable_progress_bar()
    dev = _resolve_device(device)
    try:
        config = AutoConfig.from_pretrained(model_name)
    except (OSError, ValueError) as exc:
        raise ModelResolutionError(
            f"cannot resolve checkpoint {model_name!r}: {exc}")
    if config.model_type not in _FAMILIES:
        raise ModelResolutionError(
            f"{model_name!r} is a {config.model_type!r} model; supported "
            f"families: {', '.join(_FAMILIES)}")
    try:
        model = AutoModel.from_pretrained(model_name)
    except (OSError, ValueError, EnvironmentError) as exc:
        raise ModelResolutionError(
            f"cannot load weights for {model_name!r}: {exc}")
    try:
        fe = AutoFeatureExtractor.from_pretrained(model_name)
    except (OSError, ValueError, EnvironmentError):
        fe = _fallback_extractor(config)

    if config.model_type == "whisper":
        model = model.get_encoder()
        num_layers = config.encoder_layers + 1
        dim = config.d_model
        hop = 2 * fe.hop_length / fe.sampling_rate   # mel hop x conv stride 2
    else:
        num_layers = config.num_hidden_layers + 1
        dim = config.hidden_size
        hop = math.prod(config.conv_stride) / fe.sampling_rate
    model = model.to(dev).eval()
    return LoadedEncoder(model_type=config.model_type, model=model,
                         feature_extractor=fe, num_layers=num_layers,
                         dim=dim, frame_hop_s=hop, device=dev,
                         tag=str(model_name), )


def min_input_samples(enc: LoadedEncoder) -> int:
    """Shortest waveform the convolutional front end can frame."""
    if enc.model_type == "whisper":
        return 1
    kernels = enc.model.config.conv_kernel
    strides = enc.model.config.conv_stride
    # invert the conv length recurrence for an output of one frame
    n = 1
    for k, s in zip(reversed(kernels), reversed(strides)):
        n = (n - 1) * s + k
    return n


def _conv_output_length(enc: LoadedEncoder, n_samples: int) -> int:
    n = n_samples
    for k, s in zip(enc.model.config.conv_kernel, enc.model.config.conv_stride):
        n = (n - k) // s + 1
    return n


def input_rate(enc: LoadedEncoder) -> int:
    return int(enc.feature_extractor.sampling_rate)


def hidden_stacks(enc: LoadedEncoder, waves: list) -> list:
    """Layer stacks for equally long waveforms, one (L, T, D) float32
    array per clip.

    Callers must group clips by length: equal lengths need no padding,
    which keeps every exported frame independent of batch composition.
    """
    if not waves:
        return []
    lengths = {len(w) for w in waves}
    if len(lengths) != 1:
        raise ExportConfigError("hidden_stacks needs equally long clips")
    (n_samples,) = lengths
    if n_samples < min_input_samples(enc):
        raise AudioTooShort(
            f"clip of {n_samples} samples is below the model's minimum "
            f"receptive field of {min_input_samples(enc)}")

    fe = enc.feature_extractor
    arrays = [np.asarray(w, dtype=np.float64) for w in waves]
    with torch.no_grad():
        if enc.model_type == "whisper":
            feats = fe(arrays, sampling_rate=fe.sampling_rate,
                       return_tensors="pt")
            x = feats.input_features.to(enc.device)
            out = enc.model(x, output_hidden_states=True)
        else:
            feats = fe(arrays, sampling_rate=fe.sampling_rate,
                       return_tensors="pt")
            x = feats.input_values.to(enc.device)
            out = enc.model(x, output_hidden_states=True)
        hs = torch.stack(out.hidden_states)          # (L, B, T, D)
    if hs.shape[0] != enc.num_layers or hs.shape[-1] != enc.dim:
        raise ModelResolutionError(
            f"model reported {enc.num_layers} layers x {enc.dim} dims but "
            f"produced {hs.shape[0]} x {hs.shape[-1]}")
    stacked = hs.permute(1, 0, 2, 3).cpu().numpy().astype("<f4")
    return [stacked[i] for i in range(stacked.shape[0])]
