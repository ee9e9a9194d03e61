"""Attention-pooled regression network with manual reverse-mode gradients.

Per-frame features pass through three fully connected layers, each
followed by batch normalization, ReLU, and (in training) inverted
dropout. A per-utterance attention head scores every frame, softmaxes the
scores over time, and pools the frames into one vector, which a linear
head maps to the target attributes. All math runs in float64 so gradient
checks against finite differences are tight; every activation needed by
the backward pass is cached by the training-mode forward.

Checkpoints serialize every parameter tensor plus a caller-supplied
metadata record to a deterministic little-endian layout, so identical
states produce identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._kernels import bn_backward, bn_forward
from .errors import (
    CalledBeforeForward,
    ConfigError,
    CorruptStack,
    FormatError,
    NonFiniteValues,
    ShapeError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_CKPT_MAGIC = b"VQCK"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""

    in_dim: int
    num_targets: int
    hidden: tuple = (512, 256, 128)
    attn_dim: int = 64
    num_layers: int = 1  # embedding-stack layers driving the logit vector
    dropout: float = 0.3

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 3 or min(self.hidden) < 1:
            raise ConfigError("hidden must be three positive layer widths")
        if self.in_dim < 1 or self.num_targets < 1 or self.attn_dim < 1:
            raise ConfigError("in_dim, num_targets, attn_dim must be >= 1")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def as_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "num_targets": self.num_targets,
            "hidden": list(self.hidden),
            "attn_dim": self.attn_dim,
            "num_layers": self.num_layers,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            in_dim=d["in_dim"],
            num_targets=d["num_targets"],
            hidden=tuple(d["hidden"]),
            attn_dim=d["attn_dim"],
            num_layers=d["num_layers"],
            dropout=d["dropout"],
        )


@dataclass
class ModelParams:
    """All network parameters, batch-norm running statistics included."""

    layer_logits: np.ndarray
    fc_w: list = field(default_factory=list)
    fc_b: list = field(default_factory=list)
    bn_gamma: list = field(default_factory=list)
    bn_beta: list = field(default_factory=list)
    bn_mean: list = field(default_factory=list)
    bn_var: list = field(default_factory=list)
    attn_proj_w: np.ndarray = None
    attn_proj_b: np.ndarray = None
    attn_score_w: np.ndarray = None
    attn_score_b: np.ndarray = None
    head_w: np.ndarray = None
    head_b: np.ndarray = None

    def trainable_items(self):
        """(name, array) pairs in a fixed order; arrays are live references."""
        items = [("layer_logits", self.layer_logits)]
        for i in range(3):
            items += [
                (f"fc{i + 1}_w", self.fc_w[i]),
                (f"fc{i + 1}_b", self.fc_b[i]),
                (f"bn{i + 1}_gamma", self.bn_gamma[i]),
                (f"bn{i + 1}_beta", self.bn_beta[i]),
            ]
        items += [
            ("attn_proj_w", self.attn_proj_w),
            ("attn_proj_b", self.attn_proj_b),
            ("attn_score_w", self.attn_score_w),
            ("attn_score_b", self.attn_score_b),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]
        return items

    def all_items(self):
        """Trainable parameters plus running statistics, fixed order."""
        items = self.trainable_items()
        for i in range(3):
            items += [
                (f"bn{i + 1}_mean", self.bn_mean[i]),
                (f"bn{i + 1}_var", self.bn_var[i]),
            ]
        return items

    @classmethod
    def from_named(cls, arrays: dict) -> "ModelParams":
        return cls(
            layer_logits=arrays["layer_logits"],
            fc_w=[arrays[f"fc{i}_w"] for i in (1, 2, 3)],
            fc_b=[arrays[f"fc{i}_b"] for i in (1, 2, 3)],
            bn_gamma=[arrays[f"bn{i}_gamma"] for i in (1, 2, 3)],
            bn_beta=[arrays[f"bn{i}_beta"] for i in (1, 2, 3)],
            bn_mean=[arrays[f"bn{i}_mean"] for i in (1, 2, 3)],
            bn_var=[arrays[f"bn{i}_var"] for i in (1, 2, 3)],
            attn_proj_w=arrays["attn_proj_w"],
            attn_proj_b=arrays["attn_proj_b"],
            attn_score_w=arrays["attn_score_w"],
            attn_score_b=arrays["attn_score_b"],
            head_w=arrays["head_w"],
            head_b=arrays["head_b"],
        )


def init_params(rng: np.random.Generator, cfg: ModelConfig) -> ModelParams:
    """He-initialized weights, identity batch norm, zero layer logits."""
    widths = (cfg.in_dim,) + cfg.hidden
    p = ModelParams(layer_logits=np.zeros(cfg.num_layers))
    for i in range(3):
        fan_in, fan_out = widths[i], widths[i + 1]
        p.fc_w.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        p.fc_b.append(np.zeros(fan_out))
        p.bn_gamma.append(np.ones(fan_out))
        p.bn_beta.append(np.zeros(fan_out))
        p.bn_mean.append(np.zeros(fan_out))
        p.bn_var.append(np.ones(fan_out))
    h3 = cfg.hidden[2]
    p.attn_proj_w = rng.standard_normal((cfg.attn_dim, h3)) * np.sqrt(1.0 / h3)
    p.attn_proj_b = np.zeros(cfg.attn_dim)
    p.attn_score_w = rng.standard_normal(cfg.attn_dim) * np.sqrt(1.0 / cfg.attn_dim)
    p.attn_score_b = np.zeros(1)
    p.head_w = rng.standard_normal((cfg.num_targets, h3)) * np.sqrt(1.0 / h3)
    p.head_b = np.zeros(cfg.num_targets)
    return p


def linear_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients of rows @ W.T + b: returns (dW, db, dx)."""
    return dout.T @ x, dout.sum(axis=0), dout @ W


def _check_mode(mode: str):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def backbone_forward(
    x: np.ndarray,
    p: ModelParams,
    mode: str = "eval",
    *,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    cache: Optional[dict] = None,
    update_running: bool = False,
) -> np.ndarray:
    """Three FC+BN+ReLU stages over frame rows.

    Train mode normalizes with the given rows' own statistics (biased
    variance); eval mode uses the stored running statistics and is
    deterministic. Dropout is applied only in train mode and only when an
    rng is supplied, keeping un-seeded calls reproducible.
    """
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.fc_w[0].shape[1]:
        raise ShapeError(
            f"expected rows of width {p.fc_w[0].shape[1]}, got {x.shape}"
        )
    if cache is not None:
        cache["layers"] = []
    h = x
    for i in range(3):
        a = h @ p.fc_w[i].T
        a += p.fc_b[i]
        if mode == "train":
            # the inverted-dropout scale folds into the BN affine: it is
            # positive, so the ReLU mask on the scaled values is unchanged
            dropping = dropout > 0.0 and rng is not None
            scale = 1.0 / (1.0 - dropout) if dropping else 1.0
            draws = rng.random(a.shape, dtype=np.float32) if dropping else None
            out, keep, mu, var, inv_std, coef = bn_forward(
                a, p.bn_gamma[i], p.bn_beta[i], BN_EPS, scale, draws, dropout
            )
            if update_running:
                p.bn_mean[i][:] = (1 - BN_MOMENTUM) * p.bn_mean[i] + BN_MOMENTUM * mu
                p.bn_var[i][:] = (1 - BN_MOMENTUM) * p.bn_var[i] + BN_MOMENTUM * var
            if cache is not None:
                cache["layers"].append(
                    {
                        "x": h,
                        "a": a,
                        "mu": mu,
                        "inv_std": inv_std,
                        "coef": coef,
                        "scale": scale,
                        "keep": keep,
                    }
                )
        else:
            inv_std = 1.0 / np.sqrt(p.bn_var[i] + BN_EPS)
            coef = p.bn_gamma[i] * inv_std
            out = a * coef
            out += p.bn_beta[i] - p.bn_mean[i] * coef
            out *= out > 0
        h = out
    return h


def attention_pool(H: np.ndarray, p: ModelParams, cache: Optional[dict] = None):
    """Score every frame, softmax over time, pool: returns (alpha, z)."""
    H = np.asarray(H, dtype=np.float64)
    u = np.tanh(H @ p.attn_proj_w.T + p.attn_proj_b)
    e = u @ p.attn_score_w + p.attn_score_b[0]
    e = e - e.max()
    alpha = np.exp(e)
    alpha /= alpha.sum()
    z = alpha @ H
    if cache is not None:
        cache.update({"H": H, "u": u, "alpha": alpha, "z": z})
    return alpha, z


def predict(x: np.ndarray, p: ModelParams, mode: str = "eval") -> np.ndarray:
    """Raw per-attribute scores for one utterance; no output activation."""
    H = backbone_forward(x, p, mode)
    _, z = attention_pool(H, p)
    return p.head_w @ z + p.head_b


def fuse(
    frames: np.ndarray,
    lld: Optional[np.ndarray] = None,
    lld_mean: Optional[np.ndarray] = None,
    lld_std: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Append utterance-level descriptors to every frame of the features.

    The descriptor vector is standardized with the supplied statistics
    (training-set mean/std) before being broadcast along the time axis.
    With no descriptors the frame matrix passes through unchanged.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"frame features must be 2-D, got shape {frames.shape}")
    if lld is None:
        return frames.copy()
    v = np.asarray(lld, dtype=np.float64).reshape(-1)
    if not np.isfinite(v).all():
        raise NonFiniteValues("descriptor vector has non-finite entries")
    if lld_mean is not None:
        v = (v - np.asarray(lld_mean, dtype=np.float64)) / np.asarray(
            lld_std, dtype=np.float64
        )
    cols = np.broadcast_to(v, (frames.shape[0], v.size))
    return np.concatenate([frames, cols], axis=1)


class QualityRegressionNet:
    """Batched forward/backward over variable-length utterances.

    Frames of all utterances in the batch are flattened into one row block
    so batch normalization sees batch x frames statistics; attention then
    pools each utterance's own rows. backward() consumes the cache left by
    the latest train-mode forward and returns parameter gradients plus the
    gradient w.r.t. every input feature matrix.
    """

    def __init__(self, params: ModelParams, config: ModelConfig):
        self.params = params
        self.config = config
        self._cache = None

    def forward(
        self,
        feats: list,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        _check_mode(mode)
        if not feats:
            raise ShapeError("empty batch")
        mats = []
        for f in feats:
            f = np.asarray(f, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] != self.config.in_dim:
                raise ShapeError(
                    f"each utterance needs shape (T>=1, {self.config.in_dim}), "
                    f"got {f.shape}"
                )
            mats.append(f)
        lengths = np.array([m.shape[0] for m in mats], dtype=np.int64)
        return self._forward_rows(np.vstack(mats), lengths, mode, rng)

    def _forward_rows(
        self,
        rows: np.ndarray,
        lengths: np.ndarray,
        mode: str,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """Flat-row path: rows stacks every utterance's frames in order."""
        p = self.params
        cache = {} if mode == "train" else None
        H = backbone_forward(
            rows,
            p,
            mode,
            dropout=self.config.dropout,
            rng=rng,
            cache=cache,
            update_running=(mode == "train"),
        )

        # attention over each utterance's own segment of rows
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        starts = bounds[:-1]
        U = np.tanh(H @ p.attn_proj_w.T + p.attn_proj_b)
        e = U @ p.attn_score_w + p.attn_score_b[0]
        e -= np.repeat(np.maximum.reduceat(e, starts), lengths)
        np.exp(e, out=e)
        e /= np.repeat(np.add.reduceat(e, starts), lengths)
        Z = np.add.reduceat(H * e[:, None], starts, axis=0)
        preds = Z @ p.head_w.T + p.head_b

        if cache is not None:
            cache.update(
                {
                    "bounds": bounds,
                    "lengths": lengths,
                    "H": H,
                    "U": U,
                    "alpha": e,
                    "Z": Z,
                    "n": len(lengths),
                }
            )
            self._cache = cache
        else:
            self._cache = None
        return preds

    def backward(self, dpred: np.ndarray):
        """Gradients for sum(dpred * preds); returns (grads, dfeats)."""
        c = self._cache
        grads, drows = self._backward_rows(dpred)
        bounds = c["bounds"]
        dfeats = [drows[bounds[i]:bounds[i + 1]] for i in range(c["n"])]
        return grads, dfeats

    def _backward_rows(self, dpred: np.ndarray):
        """Flat-row twin of backward: the input gradient stays one block."""
        c = self._cache
        if c is None:
            raise CalledBeforeForward(
                "backward requires a preceding train-mode forward"
            )
        p = self.params
        dpred = np.asarray(dpred, dtype=np.float64)
        if dpred.shape != (c["n"], self.config.num_targets):
            raise ShapeError(f"upstream gradient shape {dpred.shape} mismatched")

        grads = {"layer_logits": np.zeros_like(p.layer_logits)}
        grads["head_w"], grads["head_b"], dZ = linear_backward(
            dpred, c["Z"], p.head_w
        )

        lengths = c["lengths"]
        starts = c["bounds"][:-1]
        H, U, alpha = c["H"], c["U"], c["alpha"]
        dZrep = np.repeat(dZ, lengths, axis=0)
        dalpha = np.einsum("nd,nd->n", H, dZrep)
        seg = np.add.reduceat(alpha * dalpha, starts)
        de = alpha * (dalpha - np.repeat(seg, lengths))
        grads["attn_score_w"] = U.T @ de
        grads["attn_score_b"] = np.array([de.sum()])
        dpre = de[:, None] * p.attn_score_w
        dpre *= 1.0 - U ** 2
        grads["attn_proj_w"] = dpre.T @ H
        grads["attn_proj_b"] = dpre.sum(axis=0)
        dH = alpha[:, None] * dZrep
        dH += dpre @ p.attn_proj_w

        d = dH
        for i in reversed(range(3)):
            lc = c["layers"][i]
            # batch-statistics backward: mu and var both depend on the rows,
            # so dx = inv_std*(dxhat - mean(dxhat)) - inv_std^3*mean(dxhat*xc)*xc;
            # the forward's folded dropout scale rides along inside coef
            dgamma, dbeta = bn_backward(
                d, lc["a"], lc["mu"], lc["inv_std"], lc["coef"],
                lc["scale"], lc["keep"],
            )
            grads[f"bn{i + 1}_gamma"] = dgamma
            grads[f"bn{i + 1}_beta"] = dbeta
            dW, db, d = linear_backward(d, lc["x"], p.fc_w[i])
            grads[f"fc{i + 1}_w"] = dW
            grads[f"fc{i + 1}_b"] = db

        return grads, d


def save_checkpoint(path, params: ModelParams, meta: dict) -> None:
    """Serialize params + metadata; identical inputs give identical bytes."""
    items = params.all_items()
    directory = [[name, list(arr.shape)] for name, arr in items]
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes()
                       for _, arr in items)
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dir_b = json.dumps(directory, separators=(",", ":")).encode("utf-8")
    blob = _CKPT_MAGIC + struct.pack("<I", _CKPT_VERSION)
    blob += struct.pack("<I", len(meta_b)) + meta_b
    blob += struct.pack("<I", len(dir_b)) + dir_b
    blob += payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, meta)."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (dir_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        directory = json.loads(blob[off:off + dir_len].decode("utf-8"))
        off += dir_len
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptStack(f"{path}: malformed checkpoint header") from exc
    arrays = {}
    for name, shape in directory:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob) - 4:
            raise CorruptStack(f"{path}: tensor data truncated")
        arr = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(shape)
        off = end
    if len(blob) < off + 4:
        raise CorruptStack(f"{path}: missing checksum")
    (crc,) = struct.unpack_from("<I", blob, off)
    payload_start = len(blob) - 4 - sum(
        8 * int(np.prod(s)) for _, s in directory
    )
    if zlib.crc32(blob[payload_start:off]) & 0xFFFFFFFF != crc:
        raise CorruptStack(f"{path}: checksum mismatch")
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise NonFiniteValues(f"{path}: tensor {name} has non-finite values")
    return ModelParams.from_named(arrays), meta
