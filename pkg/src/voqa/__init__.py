"""Voice quality assessment toolkit.

Predicts auditory-perceptual voice ratings from speech foundation model
embedding stacks fused with acoustic low-level descriptors, with the full
training, evaluation, and noise-robustness pipeline behind a single CLI.
"""

__version__ = "0.1.0"

from .audio import FrameGrid, Waveform, load_wav, resample, save_wav
from .errors import VoqaError
from .estimator import VoiceQualityRegressor
from .experiment import ExperimentConfig, run_experiment
from .lld import LLDExtractor, LLDVector, extract_llds, track_pitch
from .manifest import read_manifest, validate_manifest, write_manifest
from .network import ModelConfig, QualityRegressionNet, load_checkpoint
from .stacks import EmbeddingStack, LayerWeights, read_stack, write_stack
from .training import (
    TrainConfig,
    TrainSample,
    make_splits,
    patient_aggregate,
    pcc,
    rmse,
    train,
    wmse,
)

__all__ = [
    "EmbeddingStack",
    "ExperimentConfig",
    "FrameGrid",
    "LLDExtractor",
    "LLDVector",
    "LayerWeights",
    "ModelConfig",
    "QualityRegressionNet",
    "TrainConfig",
    "TrainSample",
    "VoiceQualityRegressor",
    "VoqaError",
    "Waveform",
    "__version__",
    "extract_llds",
    "load_checkpoint",
    "load_wav",
    "make_splits",
    "patient_aggregate",
    "pcc",
    "read_manifest",
    "read_stack",
    "resample",
    "rmse",
    "run_experiment",
    "save_wav",
    "track_pitch",
    "train",
    "validate_manifest",
    "wmse",
    "write_manifest",
    "write_stack",
]
