"""Severity-weighted training, metrics, and patient-disjoint splitting.

The loss multiplies each squared residual by 1 + beta * (target / y_max),
so errors on severely rated samples cost more; y_max comes from the
training targets alone. Optimization is Adam with decoupled weight decay.
Evaluation reports RMSE and Pearson correlation per attribute and
macro-averaged, at utterance level and after averaging each speaker's
utterances. Splits are made at speaker level, stratified by the severity
quartile of the first attribute, so no speaker leaks across sides.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._kernels import adamw_apply
from .errors import (
    ConfigError,
    DegenerateScale,
    InsufficientSpeakers,
    NonFiniteGradient,
    ShapeError,
    UndefinedCorrelation,
)
from .network import (
    ModelConfig,
    ModelParams,
    QualityRegressionNet,
    init_params,
    save_checkpoint,
)
from .stacks import EmbeddingStack, last_layer, softmax

_HOLDOUT_TRAIN_FRACTION = 226.0 / 283.0

# descriptor orderings by fusion kind
_LLD_DIMS = {"jsh": 3, "cpp": 4}
_BASE_MODES = ("sfm_last", "sfm_ws", "lld_only")


# ---- configuration and data carriers ----

@dataclass
class TrainConfig:
    """Training-loop hyperparameters."""

    epochs: int = 100
    learning_rate: float = 0.002
    weight_decay: float = 1e-5
    beta: float = 1.0
    batch_size: int = 16
    dropout: float = 0.3
    seed: int = 0
    hidden: tuple = (512, 256, 128)
    attn_dim: int = 64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.batch_size < 4:
            raise ConfigError("batch_size must be >= 4 (batch norm needs it)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def as_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta": self.beta,
            "batch_size": self.batch_size,
            "dropout": self.dropout,
            "seed": self.seed,
            "hidden": list(self.hidden),
            "attn_dim": self.attn_dim,
        }


@dataclass
class TrainSample:
    """One utterance ready for training: embeddings, descriptors, label."""

    stack: EmbeddingStack
    lld: Optional[np.ndarray]
    target: np.ndarray
    speaker_id: str
    utterance_id: str


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    history: list
    log_path: Path
    final_path: Path
    best_path: Path
    best_epoch: int
    lld_mean: Optional[np.ndarray]
    lld_std: Optional[np.ndarray]


# ---- loss ----

def target_scale(targets: np.ndarray) -> np.ndarray:
    """Per-attribute maximum of the training targets; must be positive."""
    y_max = np.asarray(targets, dtype=np.float64).max(axis=0)
    if np.any(y_max <= 0):
        raise DegenerateScale(f"per-attribute target maxima {y_max} not all > 0")
    return y_max


def _wmse_weights(target, y_max, beta):
    y_max = np.asarray(y_max, dtype=np.float64)
    if np.any(y_max <= 0):
        raise DegenerateScale(f"y_max {y_max} must be positive per attribute")
    return 1.0 + beta * (target / y_max)


def wmse(pred, target, y_max, beta: float) -> float:
    """Mean of (1 + beta * target / y_max) * squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    w = _wmse_weights(target, y_max, beta)
    return float(np.mean(w * (pred - target) ** 2))


def wmse_grad(pred, target, y_max, beta: float) -> np.ndarray:
    """d wmse / d pred, same shape as pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w = _wmse_weights(target, y_max, beta)
    return 2.0 * w * (pred - target) / pred.size


# ---- optimizer ----

def init_adamw_state(params: dict) -> dict:
    """Zero first/second moments for every named parameter, step 0."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    weight_decay: float = 0.0,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
):
    """One decoupled-weight-decay Adam update, in place on the arrays."""
    for name, g in grads.items():
        # any inf/nan entry poisons the sum; one reduction, no temporaries
        if not np.isfinite(np.sum(g)):
            raise NonFiniteGradient(f"gradient for {name} is not finite")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    decay = 1.0 - lr * weight_decay  # applied before the Adam delta
    lr_bc1 = lr / (1.0 - b1 ** t)
    bc2 = 1.0 - b2 ** t
    for name, x in params.items():
        adamw_apply(x, grads[name], state["m"][name], state["v"][name],
                    decay, b1, b2, lr_bc1, bc2, eps)
    return params, state


# ---- metrics ----

def rmse_per_attribute(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    return np.sqrt(np.mean((pred - target) ** 2, axis=0))


def rmse(pred, target) -> float:
    """Root mean squared error; macro-averaged over columns for matrices."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 1:
        return float(np.sqrt(np.mean((pred - np.asarray(target)) ** 2)))
    return float(rmse_per_attribute(pred, target).mean())


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2:
        raise UndefinedCorrelation("need at least two points")
    ac = a - a.mean()
    bc = b - b.mean()
    den = np.sqrt((ac ** 2).sum() * (bc ** 2).sum())
    if den == 0.0:
        raise UndefinedCorrelation("zero variance input")
    return float((ac * bc).sum() / den)


def pcc_per_attribute(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    return np.array([_pearson(pred[:, j], target[:, j])
                     for j in range(pred.shape[1])])


def pcc(pred, target) -> float:
    """Pearson correlation; macro-averaged over columns for matrices."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    if pred.ndim == 1:
        return _pearson(pred, target)
    return float(pcc_per_attribute(pred, target).mean())


def patient_aggregate(preds, speaker_ids, targets=None):
    """Average utterance predictions per speaker.

    Returns (speakers, aggregated predictions, aggregated targets or None);
    speakers are sorted for a deterministic row order. Targets are assumed
    identical across a speaker's utterances, so their mean is that label.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if len(speaker_ids) != preds.shape[0]:
        raise ShapeError(
            f"{len(speaker_ids)} speaker ids for {preds.shape[0]} rows"
        )
    speakers = sorted(set(speaker_ids))
    idx = {s: [] for s in speakers}
    for i, s in enumerate(speaker_ids):
        idx[s].append(i)
    agg = np.stack([preds[idx[s]].mean(axis=0) for s in speakers])
    tagg = None
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
        tagg = np.stack([targets[idx[s]].mean(axis=0) for s in speakers])
    return speakers, agg, tagg


# ---- splits ----

@dataclass
class SplitPlan:
    """Speaker-level assignment for a holdout split or five folds."""

    mode: str
    assignment: dict = field(default_factory=dict)

    @property
    def train_speakers(self):
        return sorted(s for s, a in self.assignment.items() if a == "train")

    @property
    def test_speakers(self):
        return sorted(s for s, a in self.assignment.items() if a == "test")

    def fold_speakers(self, i: int):
        return sorted(s for s, a in self.assignment.items() if a == i)


def _severity_bins(speakers, score_of):
    """Quartile index per speaker from the first attribute's distribution."""
    vals = np.array([score_of[s] for s in speakers])
    edges = np.percentile(vals, [25, 50, 75])
    return np.searchsorted(edges, vals, side="left")


def make_splits(
    speaker_ids,
    first_scores,
    mode: str = "holdout",
    seed: int = 0,
    train_fraction: float = _HOLDOUT_TRAIN_FRACTION,
) -> SplitPlan:
    """Partition speakers so no speaker sits on two sides of any split.

    Rows are utterance-level (speaker ids may repeat); the partition is
    computed over unique speakers, stratified by severity quartile of the
    first attribute, shuffled by the seeded generator.
    """
    if mode not in ("holdout", "cv5"):
        raise ConfigError(f"unknown split mode {mode!r}")
    score_of = {}
    for s, v in zip(speaker_ids, np.asarray(first_scores, dtype=np.float64)):
        score_of.setdefault(s, float(v))
    speakers = sorted(score_of)
    if mode == "cv5" and len(speakers) < 10:
        raise InsufficientSpeakers(
            f"cv5 needs >= 10 speakers, got {len(speakers)}"
        )
    rng = np.random.default_rng(seed)
    bins = _severity_bins(speakers, score_of)
    by_bin = []
    for q in range(4):
        members = [speakers[i] for i in np.flatnonzero(bins == q)]
        order = rng.permutation(len(members))
        by_bin.append([members[i] for i in order])

    plan = SplitPlan(mode=mode)
    if mode == "holdout":
        total_train = int(round(len(speakers) * train_fraction))
        quotas = [len(b) * train_fraction for b in by_bin]
        base = [int(np.floor(q)) for q in quotas]
        remainder = total_train - sum(base)
        # largest-remainder allocation keeps the overall count exact
        order = sorted(range(4), key=lambda i: (-(quotas[i] - base[i]), i))
        for i in order[:remainder]:
            base[i] += 1
        for q in range(4):
            for j, s in enumerate(by_bin[q]):
                plan.assignment[s] = "train" if j < base[q] else "test"
    else:
        stream = [s for b in by_bin for s in b]
        for j, s in enumerate(stream):
            plan.assignment[s] = j % 5
    return plan


# ---- feature assembly ----

def parse_feature_mode(mode: str):
    """Split a mode string into (base, descriptor kind, descriptor dims)."""
    base, _, extra = mode.partition("+")
    if base not in _BASE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}")
    if base == "lld_only":
        if extra:
            raise ConfigError(f"unknown feature mode {mode!r}")
        return base, "jsh", 3
    if not extra:
        return base, None, 0
    if extra not in _LLD_DIMS:
        raise ConfigError(f"unknown feature mode {mode!r}")
    return base, extra, _LLD_DIMS[extra]


def lld_stats(samples, dims: int):
    """Training-set mean/std of the first `dims` descriptor entries."""
    rows = np.array([np.asarray(s.lld, dtype=np.float64)[:dims]
                     for s in samples])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _assemble_rows(samples, logits, base, lld_kind, dims, lld_mean, lld_std):
    """Batch feature assembly: one flat row block plus per-utterance lengths.

    Returns (rows, lengths, big) where big is the layer-major concatenation
    of every stack (needed for the logit gradient) or None for the modes
    that never differentiate the aggregation weights.
    """
    if base == "lld_only":
        rows = np.array(
            [(np.asarray(s.lld, dtype=np.float64)[:dims] - lld_mean) / lld_std
             for s in samples]
        )
        if not np.isfinite(rows).all():
            raise NonFiniteValues("descriptor vector has non-finite entries")
        return rows, np.ones(len(samples), dtype=np.int64), None

    lengths = np.array([s.stack.num_frames for s in samples], dtype=np.int64)
    big = None
    if base == "sfm_ws":
        big = np.concatenate([s.stack.values for s in samples], axis=1)
        frames = np.tensordot(softmax(logits), big, axes=(0, 0))
    else:
        frames = np.concatenate([last_layer(s.stack) for s in samples], axis=0)
    if dims == 0:
        return frames, lengths, big
    lrows = np.array(
        [(np.asarray(s.lld, dtype=np.float64)[:dims] - lld_mean) / lld_std
         for s in samples]
    )
    if not np.isfinite(lrows).all():
        raise NonFiniteValues("descriptor vector has non-finite entries")
    d = frames.shape[1]
    rows = np.empty((frames.shape[0], d + dims))
    rows[:, :d] = frames
    rows[:, d:] = np.repeat(lrows, lengths, axis=0)
    return rows, lengths, big


def batch_loss_and_grads(
    samples,
    params: ModelParams,
    mcfg: ModelConfig,
    base: str,
    lld_kind,
    lld_mean,
    lld_std,
    y_max,
    beta: float,
    rng=None,
):
    """Forward + backward over one batch; returns (loss, gradient dict).

    Aggregation weights over the embedding layers are part of the model,
    so their gradient flows back through each utterance's frame gradient;
    it is accumulated over the whole batch in one softmax-jacobian step
    (valid because the jacobian is linear in the summed inner products).
    """
    dims = 0 if lld_kind is None else _LLD_DIMS[lld_kind]
    net = QualityRegressionNet(params, mcfg)
    rows, lengths, big = _assemble_rows(
        samples, params.layer_logits, base, lld_kind, dims, lld_mean, lld_std
    )
    targets = np.array([s.target for s in samples], dtype=np.float64)
    preds = net._forward_rows(rows, lengths, "train", rng)
    loss = wmse(preds, targets, y_max, beta)
    grads, drows = net._backward_rows(wmse_grad(preds, targets, y_max, beta))
    if base == "sfm_ws":
        up = drows if dims == 0 else drows[:, :big.shape[2]]
        s_all = np.einsum("lnd,nd->l", big, up)
        w = softmax(params.layer_logits)
        grads["layer_logits"] = w * (s_all - w @ s_all)
    return loss, grads


# ---- training loop ----

def predict_samples(samples, params, mcfg, feature_mode: str,
                    lld_mean=None, lld_std=None) -> np.ndarray:
    """Eval-mode predictions for a list of samples, one row per utterance."""
    base, lld_kind, dims = parse_feature_mode(feature_mode)
    net = QualityRegressionNet(params, mcfg)
    rows, lengths, _ = _assemble_rows(
        samples, params.layer_logits, base, lld_kind, dims, lld_mean, lld_std
    )
    return net._forward_rows(rows, lengths, "eval")


def _eval_metrics(samples, params, mcfg, base, lld_kind, dims, lld_mean, lld_std):
    net = QualityRegressionNet(params, mcfg)
    rows, lengths, _ = _assemble_rows(
        samples, params.layer_logits, base, lld_kind, dims, lld_mean, lld_std
    )
    preds = net._forward_rows(rows, lengths, "eval")
    targets = np.array([s.target for s in samples], dtype=np.float64)
    out = {"rmse_per": rmse_per_attribute(preds, targets).tolist()}
    out["rmse"] = float(np.mean(out["rmse_per"]))
    per = []
    for j in range(targets.shape[1]):
        try:
            per.append(_pearson(preds[:, j], targets[:, j]))
        except UndefinedCorrelation:
            per.append(None)
    out["pcc_per"] = per
    defined = [v for v in per if v is not None]
    out["pcc"] = float(np.mean(defined)) if defined else None
    return out


def train(
    train_set,
    val_set,
    config: TrainConfig,
    feature_mode: str = "sfm_ws+jsh",
    out_dir=None,
) -> TrainResult:
    """Minibatch training with per-epoch logging and two checkpoints.

    Fully deterministic under the config seed: parameter init, batch
    order, and dropout masks all come from one generator. The final and
    the best-validation-RMSE parameters are both saved.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    if out_dir is None:
        raise ConfigError("out_dir is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    base, lld_kind, dims = parse_feature_mode(feature_mode)
    if lld_kind is not None:
        lld_mean, lld_std = lld_stats(train_set, dims)
    else:
        lld_mean = lld_std = None

    if base == "lld_only":
        in_dim = dims
        num_layers = 1
    else:
        in_dim = train_set[0].stack.dim + dims
        num_layers = train_set[0].stack.num_layers
    num_targets = int(np.asarray(train_set[0].target).size)
    mcfg = ModelConfig(
        in_dim=in_dim,
        num_targets=num_targets,
        hidden=config.hidden,
        attn_dim=config.attn_dim,
        num_layers=num_layers,
        dropout=config.dropout,
    )

    rng = np.random.default_rng(config.seed)
    params = init_params(rng, mcfg)
    state = init_adamw_state(dict(params.trainable_items()))
    targets = np.array([s.target for s in train_set], dtype=np.float64)
    y_max = target_scale(targets)

    history = []
    best_epoch = 0
    best_rmse = np.inf
    best_params = copy.deepcopy(params)
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as log:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            sizes = []
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                loss, grads = batch_loss_and_grads(
                    batch, params, mcfg, base, lld_kind, lld_mean, lld_std,
                    y_max, config.beta, rng=rng,
                )
                adamw_step(
                    dict(params.trainable_items()), grads, state,
                    lr=config.learning_rate, weight_decay=config.weight_decay,
                )
                losses.append(loss)
                sizes.append(len(batch))
            record = {
                "epoch": epoch,
                "train_loss": float(np.average(losses, weights=sizes)),
                "val_rmse": None,
                "val_pcc": None,
                "val_rmse_per": None,
                "val_pcc_per": None,
            }
            if val_set:
                m = _eval_metrics(val_set, params, mcfg, base, lld_kind, dims,
                                  lld_mean, lld_std)
                record.update(
                    val_rmse=m["rmse"], val_pcc=m["pcc"],
                    val_rmse_per=m["rmse_per"], val_pcc_per=m["pcc_per"],
                )
                if m["rmse"] < best_rmse:
                    best_rmse = m["rmse"]
                    best_epoch = epoch
                    best_params = copy.deepcopy(params)
            history.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
    if not val_set:
        best_epoch = config.epochs
        best_params = params

    meta_common = {
        "model_config": mcfg.as_dict(),
        "train_config": config.as_dict(),
        "feature_mode": feature_mode,
        "lld_mean": None if lld_mean is None else lld_mean.tolist(),
        "lld_std": None if lld_std is None else lld_std.tolist(),
        "best_epoch": best_epoch,
    }
    final_path = out_dir / "final.vqck"
    best_path = out_dir / "best.vqck"
    save_checkpoint(final_path, params,
                    {**meta_common, "epoch": config.epochs})
    save_checkpoint(best_path, best_params,
                    {**meta_common, "epoch": best_epoch})
    return TrainResult(
        params=params,
        model_config=mcfg,
        history=history,
        log_path=log_path,
        final_path=final_path,
        best_path=best_path,
        best_epoch=best_epoch,
        lld_mean=lld_mean,
        lld_std=lld_std,
    )
