"""Per-layer hidden-state exporter for speech encoders.

Writes one .vqes stack file per manifest row so that the downstream
voice-quality toolkit can consume foundation-model features without
touching the model ecosystem itself.
"""

from .container import check_vqes, write_vqes
from .errors import (
    AudioTooShort,
    BadManifest,
    ExportConfigError,
    ExportError,
    ModelResolutionError,
)
from .export import ExportJob, ExportSummary, export_stacks
from .models import LoadedEncoder, hidden_stacks, load_encoder, min_input_samples

__version__ = "0.1.0"

__all__ = [
    "AudioTooShort",
    "BadManifest",
    "ExportConfigError",
    "ExportError",
    "ExportJob",
    "ExportSummary",
    "LoadedEncoder",
    "ModelResolutionError",
    "check_vqes",
    "export_stacks",
    "hidden_stacks",
    "load_encoder",
    "min_input_samples",
    "write_vqes",
    "__version__",
]
