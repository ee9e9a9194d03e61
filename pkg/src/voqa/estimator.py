"""Scikit-learn estimator facade over the training loop.

The underlying train() function works on TrainSample records and writes
checkpoints to disk. VoiceQualityRegressor adapts that to the familiar
fit/predict surface so the model slots into sklearn tooling (pipelines,
clone, grid search over get_params). Inputs may be TrainSample rows or
plain (stack, descriptors) pairs with a separate target matrix.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError
from .network import ModelConfig, load_checkpoint
from .stacks import EmbeddingStack
from .training import TrainConfig, TrainSample, predict_samples, train


def _as_samples(X, y, num_targets=None):
    """Coerce estimator input into TrainSample records.

    Rows may be TrainSample (y must then be omitted), EmbeddingStack,
    (EmbeddingStack, descriptor-vector) pairs, or bare descriptor vectors
    for the descriptor-only mode. y supplies targets for the non-sample
    forms; at predict time it is None and placeholder targets are used.
    """
    X = list(X)
    if not X:
        raise ConfigError("X is empty")
    if all(isinstance(x, TrainSample) for x in X):
        if y is not None:
            raise ConfigError(
                "TrainSample rows carry their own targets; do not pass y")
        return X

    if y is not None:
        targets = np.asarray(y, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[:, None]
        if len(targets) != len(X):
            raise ConfigError(
                f"y has {len(targets)} rows for {len(X)} samples")
    elif num_targets is not None:
        targets = np.zeros((len(X), num_targets))
    else:
        raise ConfigError("y is required for rows without embedded targets")

    samples = []
    for i, x in enumerate(X):
        if isinstance(x, EmbeddingStack):
            stack, lld = x, None
        elif isinstance(x, (tuple, list)) and len(x) == 2:
            stack, lld = x
            lld = None if lld is None else np.asarray(lld, dtype=np.float64)
        elif isinstance(x, np.ndarray) and x.ndim == 1:
            stack, lld = None, np.asarray(x, dtype=np.float64)
        else:
            raise ConfigError(
                "each row must be a TrainSample, an EmbeddingStack, a "
                "(stack, descriptors) pair, or a 1-D descriptor vector")
        samples.append(TrainSample(
            stack=stack, lld=lld, target=targets[i],
            speaker_id=f"x{i:05d}", utterance_id=f"x{i:05d}",
        ))
    return samples


class VoiceQualityRegressor(RegressorMixin, BaseEstimator):
    """Attention-pooled multi-attribute regressor with a fit/predict API.

    Parameters mirror TrainConfig plus the feature mode. out_dir receives
    the training log and checkpoints; when None a fresh temporary
    directory is used and exposed as out_dir_ after fitting.
    """

    def __init__(self, feature_mode="sfm_ws+jsh", epochs=100,
                 learning_rate=0.002, weight_decay=1e-5, beta=1.0,
                 batch_size=16, dropout=0.3, hidden=(512, 256, 128),
                 attn_dim=64, seed=0, out_dir=None):
        self.feature_mode = feature_mode
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta = beta
        self.batch_size = batch_size
        self.dropout = dropout
        self.hidden = hidden
        self.attn_dim = attn_dim
        self.seed = seed
        self.out_dir = out_dir

    def fit(self, X, y=None, val=None, val_y=None):
        """Train on X (see _as_samples for accepted row forms).

        val/val_y give an optional held-out set; when present the best
        checkpoint tracks its RMSE, otherwise the final epoch wins.
        """
        samples = _as_samples(X, y)
        val_samples = _as_samples(val, val_y) if val is not None else []
        config = TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, beta=self.beta,
            batch_size=self.batch_size, dropout=self.dropout,
            seed=self.seed, hidden=tuple(self.hidden),
            attn_dim=self.attn_dim,
        )
        out_dir = self.out_dir
        if out_dir is None:
            out_dir = tempfile.mkdtemp(prefix="vqreg-")
        result = train(samples, val_samples, config,
                       feature_mode=self.feature_mode, out_dir=out_dir)
        self.result_ = result
        self.params_ = result.params
        self.model_config_ = result.model_config
        self.lld_mean_ = result.lld_mean
        self.lld_std_ = result.lld_std
        self.out_dir_ = Path(out_dir)
        self.n_targets_ = result.model_config.num_targets
        self.n_features_in_ = result.model_config.in_dim
        self._squeeze_ = y is not None and np.ndim(y) == 1
        return self

    def predict(self, X) -> np.ndarray:
        """Eval-mode predictions, shaped (n, targets) or (n,) for 1-D fits."""
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this VoiceQualityRegressor instance is not fitted yet")
        samples = _as_samples(X, None, num_targets=self.n_targets_)
        preds = predict_samples(samples, self.params_, self.model_config_,
                                self.feature_mode, self.lld_mean_,
                                self.lld_std_)
        return preds[:, 0] if self._squeeze_ else preds

    @classmethod
    def from_checkpoint(cls, path) -> "VoiceQualityRegressor":
        """Rebuild a fitted estimator from a saved checkpoint file."""
        params, meta = load_checkpoint(path)
        tc = meta.get("train_config", {})
        est = cls(feature_mode=meta.get("feature_mode", "sfm_ws+jsh"))
        for name in ("epochs", "learning_rate", "weight_decay", "beta",
                     "batch_size", "dropout", "attn_dim", "seed"):
            if name in tc:
                setattr(est, name, tc[name])
        if "hidden" in tc:
            est.hidden = tuple(tc["hidden"])
        est.params_ = params
        est.model_config_ = ModelConfig.from_dict(meta["model_config"])
        est.lld_mean_ = (None if meta.get("lld_mean") is None
                         else np.asarray(meta["lld_mean"], dtype=np.float64))
        est.lld_std_ = (None if meta.get("lld_std") is None
                        else np.asarray(meta["lld_std"], dtype=np.float64))
        est.n_targets_ = est.model_config_.num_targets
        est.n_features_in_ = est.model_config_.in_dim
        est._squeeze_ = False
        return est
