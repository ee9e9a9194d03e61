"""Experiment orchestration: declarative config in, results bundle out.

A run reads one manifest, splits speakers so none straddles a boundary,
trains on the training side, and writes a self-contained bundle: the
resolved config echoed verbatim, the split assignment, checkpoints and
per-epoch logs, utterance- and patient-level metric tables sliced by
subset and noise condition, and scatter data (points plus a fitted line
with a 95% confidence band) ready for any plotting tool. Reruns with the
same config produce byte-identical tables.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy import stats as _scipy_stats

from .audio import load_wav
from .errors import (
    ConfigError,
    InvalidManifest,
    MissingEmbeddings,
    MissingLLD,
    ShapeError,
    UndefinedCorrelation,
)
from .lld import extract_llds
from .manifest import (
    attribute_names,
    labels_from_row,
    read_manifest,
    validate_manifest,
)
from .stacks import read_stack
from .training import (
    TrainConfig,
    TrainSample,
    make_splits,
    parse_feature_mode,
    patient_aggregate,
    pcc_per_attribute,
    predict_samples,
    rmse_per_attribute,
    train,
)

_FEATURE_MODES = ("sfm_last", "sfm_ws", "lld_only", "sfm_ws+jsh", "sfm_ws+cpp")
_CONDITIONS = ("clean", "seen", "unseen")
_ROLE_CONDITION = {
    None: "clean", "": "clean", "clean": "clean",
    "train_seen": "seen", "test_seen": "seen",
    "test_unseen": "unseen",
}
_TRAIN_ROLES = (None, "", "clean", "train_seen")


# ---- configuration ----

@dataclass
class ExperimentConfig:
    """Everything one run depends on; defaults are echoed into the bundle."""

    manifest: Path
    out_dir: Path
    scale: str = "capev"
    feature_mode: str = "sfm_ws+jsh"
    split: str = "holdout"
    subsets: tuple = ("A", "S")
    base_dir: Optional[Path] = None
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        self.out_dir = Path(self.out_dir)
        attribute_names(self.scale)  # raises on unknown scale
        if self.feature_mode not in _FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if self.split not in ("holdout", "cv5"):
            raise ConfigError(f"split must be holdout or cv5, got {self.split!r}")
        self.subsets = tuple(self.subsets)
        if not self.subsets or any(s not in ("A", "S") for s in self.subsets):
            raise ConfigError(f"subsets must be drawn from A/S, got {self.subsets}")
        if len(set(self.subsets)) != len(self.subsets):
            raise ConfigError("subsets contains duplicates")
        self.base_dir = Path(self.base_dir) if self.base_dir is not None \
            else self.manifest.parent

    def as_dict(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "out_dir": str(self.out_dir),
            "scale": self.scale,
            "feature_mode": self.feature_mode,
            "split": self.split,
            "subsets": list(self.subsets),
            "base_dir": str(self.base_dir),
            "seed": self.seed,
            "train": self.train.as_dict(),
        }

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        """Load a config file; relative paths resolve against its directory."""
        path = Path(path)
        with open(path) as f:
            raw = yaml.safe_load(f)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} does not hold a mapping")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        if "manifest" not in raw or "out_dir" not in raw:
            raise ConfigError("config must name manifest and out_dir")

        here = path.parent
        kwargs = dict(raw)
        for key in ("manifest", "out_dir", "base_dir"):
            if kwargs.get(key) is not None:
                p = Path(kwargs[key])
                kwargs[key] = p if p.is_absolute() else here / p
        tr = kwargs.pop("train", None) or {}
        if not isinstance(tr, dict):
            raise ConfigError("train section must be a mapping")
        tr_allowed = {f.name for f in fields(TrainConfig)}
        tr_unknown = sorted(set(tr) - tr_allowed)
        if tr_unknown:
            raise ConfigError(f"unknown train keys {tr_unknown}")
        # the experiment seed drives everything not explicitly overridden
        tr.setdefault("seed", kwargs.get("seed", 0))
        kwargs["train"] = TrainConfig(**tr)
        return cls(**kwargs)


# ---- descriptor table with optional on-disk cache ----

def _cache_path(cache_dir, wav_path, kind, include_cpp) -> Path:
    st = os.stat(wav_path)
    key = f"{Path(wav_path).resolve()}|{st.st_size}|{st.st_mtime_ns}|{kind}|{int(include_cpp)}"
    return Path(cache_dir) / (hashlib.sha1(key.encode()).hexdigest() + ".npy")


def descriptor_row(wav_path, subset: str, include_cpp: bool,
                   cache_dir=None) -> np.ndarray:
    """Measure one utterance's descriptors; last entry is the missing flag.

    Subset A utterances are treated as sustained vowels (central-span
    trim); subset S as running speech. The cache key includes file size
    and mtime, so edits invalidate stale entries.
    """
    kind = "vowel" if subset == "A" else "sentence"
    cached = None
    if cache_dir is not None:
        cached = _cache_path(cache_dir, wav_path, kind, include_cpp)
        if cached.exists():
            return np.load(cached)
    v = extract_llds(load_wav(wav_path), subset=kind, include_cpp=include_cpp)
    arr = np.append(v.as_array(include_cpp=include_cpp),
                    1.0 if v.missing else 0.0)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        # np.save appends .npy unless the name already ends with it
        tmp = cached.with_name(cached.stem + ".tmp.npy")
        np.save(tmp, arr)
        os.replace(tmp, cached)
    return arr


# ---- dataset assembly ----

@dataclass
class Dataset:
    """Labeled rows ready for training, aligned index-for-index."""

    rows: list
    samples: list
    lld_missing: np.ndarray  # bool per row; all False when mode skips llds


def assemble_dataset(rows, config: ExperimentConfig,
                     cache_dir=None) -> Dataset:
    """Filter to usable rows and materialize stacks, descriptors, labels.

    Rows must lie in a requested subset and carry a complete rating on the
    configured scale. Modes built on embedding stacks fail up front with
    the full list of rows whose .vqes files are absent.
    """
    base_mode, lld_kind, _ = parse_feature_mode(config.feature_mode)
    need_stacks = base_mode in ("sfm_last", "sfm_ws")
    include_cpp = lld_kind == "cpp"
    base = config.base_dir

    kept = []
    for r in rows:
        role = r.get("role")
        if role not in _ROLE_CONDITION:
            raise InvalidManifest(
                f"unknown role {role!r} on utterance {r.get('utterance_id')!r}")
        if r.get("subset") in config.subsets and \
                labels_from_row(r, config.scale) is not None:
            kept.append(r)
    if not kept:
        raise InvalidManifest(
            f"no rows in subsets {list(config.subsets)} carry complete "
            f"{config.scale} ratings")

    if need_stacks:
        missing = [r["utterance_id"] for r in kept
                   if not r.get("vqes_path")
                   or not (base / r["vqes_path"]).exists()]
        if missing:
            raise MissingEmbeddings(missing)

    samples = []
    flags = np.zeros(len(kept), dtype=bool)
    shape_of = {}
    for i, r in enumerate(kept):
        stack = None
        if need_stacks:
            stack = read_stack(base / r["vqes_path"])
            shape_of[r["utterance_id"]] = (stack.num_layers, stack.dim)
        lld = None
        if lld_kind is not None:
            arr = descriptor_row(base / r["wav_path"], r["subset"],
                                 include_cpp, cache_dir)
            lld = arr[:-1]
            flags[i] = arr[-1] > 0.5
        samples.append(TrainSample(
            stack=stack, lld=lld,
            target=labels_from_row(r, config.scale),
            speaker_id=r["speaker_id"], utterance_id=r["utterance_id"],
        ))
    if need_stacks and len(set(shape_of.values())) > 1:
        raise ShapeError(
            f"embedding stacks disagree on (layers, dim): {sorted(set(shape_of.values()))}")
    return Dataset(rows=kept, samples=samples, lld_missing=flags)


def impute_missing_llds(ds: Dataset, train_idx) -> None:
    """Replace failed measurements with the training-set mean, in place.

    The mean comes from training rows only, so no test statistics leak
    into the features.
    """
    if ds.samples[0].lld is None or not ds.lld_missing.any():
        return
    ok = [i for i in train_idx if not ds.lld_missing[i]]
    if not ok:
        raise MissingLLD(
            "descriptor measurement failed on every training utterance; "
            "nothing to impute from")
    mean = np.mean([ds.samples[i].lld for i in ok], axis=0)
    for i in np.flatnonzero(ds.lld_missing):
        ds.samples[i] = replace(ds.samples[i], lld=mean.copy())


# ---- metric tables ----

def _safe_pcc_per(preds, targets):
    out = []
    for j in range(targets.shape[1]):
        try:
            out.append(float(pcc_per_attribute(
                preds[:, j:j + 1], targets[:, j:j + 1])[0]))
        except UndefinedCorrelation:
            out.append(None)
    return out


def _metric_entry(subset, condition, level, preds, targets, names) -> dict:
    rmse_per = rmse_per_attribute(preds, targets)
    pcc_per = _safe_pcc_per(preds, targets)
    defined = [v for v in pcc_per if v is not None]
    entry = {
        "subset": subset,
        "condition": condition,
        "level": level,
        "n": preds.shape[0],
        "rmse": float(rmse_per.mean()),
        "pcc": float(np.mean(defined)) if defined else None,
    }
    for name, v in zip(names, rmse_per):
        entry[f"rmse_{name}"] = float(v)
    for name, v in zip(names, pcc_per):
        entry[f"pcc_{name}"] = v
    return entry


def _ols_fit_entry(subset, condition, level, x, y) -> dict:
    """Least-squares line plus its 95% mean-response band at the x extremes."""
    entry = {"subset": subset, "condition": condition, "level": level,
             "n": int(x.size)}
    blank = dict.fromkeys(
        ("slope", "intercept", "x_lo", "x_hi",
         "band_lo_at_x_lo", "band_hi_at_x_lo",
         "band_lo_at_x_hi", "band_hi_at_x_hi"))
    sxx = float(((x - x.mean()) ** 2).sum())
    if x.size < 3 or sxx == 0.0:
        entry.update(blank)
        return entry
    slope = float(((x - x.mean()) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    s2 = float((resid ** 2).sum() / (x.size - 2))
    tq = float(_scipy_stats.t.ppf(0.975, x.size - 2))
    entry.update(slope=slope, intercept=intercept,
                 x_lo=float(x.min()), x_hi=float(x.max()))
    for tag, xe in (("x_lo", x.min()), ("x_hi", x.max())):
        half = tq * np.sqrt(s2 * (1.0 / x.size + (xe - x.mean()) ** 2 / sxx))
        mid = intercept + slope * xe
        entry[f"band_lo_at_{tag}"] = float(mid - half)
        entry[f"band_hi_at_{tag}"] = float(mid + half)
    return entry


def _write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k))
                        for k in columns})


def _format_text_table(rows, columns) -> str:
    """Fixed-width rendering of a metric table; floats to four decimals."""
    def fmt(v):
        if v is None or v == "":
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


# ---- the run itself ----

@dataclass
class RunResult:
    """One trained-and-evaluated split: metric rows plus artifact paths."""

    out_dir: Path
    metrics: list
    fits: list
    train_result: object


def _evaluate_split(ds: Dataset, test_idx, result, config: ExperimentConfig,
                    out_dir: Path) -> tuple:
    """Metric and scatter tables over the test rows, sliced every way.

    Slices: each requested subset plus "all" when several, each noise
    condition present, utterance and patient level. The scatter files
    carry the first attribute (overall severity or grade) per point.
    """
    names = attribute_names(config.scale)
    test_rows = [ds.rows[i] for i in test_idx]
    test_samples = [ds.samples[i] for i in test_idx]
    preds = predict_samples(test_samples, result.params, result.model_config,
                            config.feature_mode, result.lld_mean,
                            result.lld_std)
    targets = np.array([s.target for s in test_samples], dtype=np.float64)
    speakers = [r["speaker_id"] for r in test_rows]
    utterances = [r["utterance_id"] for r in test_rows]
    conditions = [_ROLE_CONDITION[r.get("role")] for r in test_rows]

    subset_slices = list(config.subsets)
    if len(subset_slices) > 1:
        subset_slices.append("all")

    scatter_dir = out_dir / "scatter"
    scatter_dir.mkdir(parents=True, exist_ok=True)
    metrics = []
    fits = []
    for subset in subset_slices:
        for condition in _CONDITIONS:
            sel = [k for k in range(len(test_rows))
                   if conditions[k] == condition
                   and (subset == "all" or test_rows[k]["subset"] == subset)]
            if not sel:
                continue
            p = preds[sel]
            t = targets[sel]
            spk = [speakers[k] for k in sel]
            utt = [utterances[k] for k in sel]
            agg_spk, agg_p, agg_t = patient_aggregate(p, spk, t)
            for level, lp, lt in (("utterance", p, t),
                                  ("patient", agg_p, agg_t)):
                metrics.append(_metric_entry(subset, condition, level,
                                             lp, lt, names))
                fits.append(_ols_fit_entry(subset, condition, level,
                                           lt[:, 0], lp[:, 0]))
            stem = f"points_{subset}_{condition}"
            _write_csv(scatter_dir / f"{stem}_utterance.csv",
                       [{"utterance_id": u, "speaker_id": s,
                         "actual": float(a), "predicted": float(q)}
                        for u, s, a, q in zip(utt, spk, t[:, 0], p[:, 0])],
                       ("utterance_id", "speaker_id", "actual", "predicted"))
            _write_csv(scatter_dir / f"{stem}_patient.csv",
                       [{"speaker_id": s, "actual": float(a),
                         "predicted": float(q)}
                        for s, a, q in zip(agg_spk, agg_t[:, 0], agg_p[:, 0])],
                       ("speaker_id", "actual", "predicted"))
    return metrics, fits


def _metric_columns(scale: str) -> list:
    names = attribute_names(scale)
    return (["subset", "condition", "level", "n", "rmse", "pcc"]
            + [f"rmse_{n}" for n in names] + [f"pcc_{n}" for n in names])


_FIT_COLUMNS = ("subset", "condition", "level", "n", "slope", "intercept",
                "x_lo", "x_hi", "band_lo_at_x_lo", "band_hi_at_x_lo",
                "band_lo_at_x_hi", "band_hi_at_x_hi")


def _run_one_split(ds: Dataset, train_idx, test_idx,
                   config: ExperimentConfig, out_dir: Path,
                   val_idx=()) -> RunResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    impute_missing_llds(ds, train_idx)
    train_samples = [ds.samples[i] for i in train_idx]
    val_samples = [ds.samples[i] for i in val_idx]
    result = train(train_samples, val_samples, config.train,
                   feature_mode=config.feature_mode,
                   out_dir=out_dir / "model")
    metrics, fits = _evaluate_split(ds, test_idx, result, config, out_dir)
    _write_csv(out_dir / "metrics.csv", metrics, _metric_columns(config.scale))
    _write_csv(out_dir / "fits.csv", fits, _FIT_COLUMNS)
    (out_dir / "metrics.txt").write_text(
        _format_text_table(metrics, _metric_columns(config.scale)))
    return RunResult(out_dir=out_dir, metrics=metrics, fits=fits,
                     train_result=result)


@dataclass
class ExperimentResult:
    """Everything run_experiment produced, with the bundle on disk."""

    config: ExperimentConfig
    out_dir: Path
    runs: list           # one RunResult (holdout) or five (cv5)
    summary: list        # cv5 mean/std rows; empty for holdout


def _train_indices(ds: Dataset, train_speakers) -> list:
    keep = set(train_speakers)
    return [i for i, r in enumerate(ds.rows)
            if r["speaker_id"] in keep and r.get("role") in _TRAIN_ROLES]


def _test_indices(ds: Dataset, test_speakers) -> list:
    keep = set(test_speakers)
    return [i for i, r in enumerate(ds.rows) if r["speaker_id"] in keep]


def _cv_summary(per_fold: list, scale: str) -> list:
    """Mean and std of every metric across folds, keyed by table slice."""
    value_cols = _metric_columns(scale)[3:]
    grouped = {}
    for rows in per_fold:
        for r in rows:
            grouped.setdefault((r["subset"], r["condition"], r["level"]),
                               []).append(r)
    out = []
    for key in sorted(grouped):
        rows = grouped[key]
        entry = {"subset": key[0], "condition": key[1], "level": key[2],
                 "folds": len(rows)}
        for col in value_cols:
            vals = [r[col] for r in rows if r.get(col) is not None]
            if vals:
                entry[f"{col}_mean"] = float(np.mean(vals))
                entry[f"{col}_std"] = float(np.std(vals))
            else:
                entry[f"{col}_mean"] = entry[f"{col}_std"] = None
        out.append(entry)
    return out


def run_experiment(config: ExperimentConfig, cache_dir=None) -> ExperimentResult:
    """Execute one declarative experiment end to end.

    Holdout mode trains once and evaluates the held-out speakers. cv5
    trains five fold models (fold i held out in turn) and adds a
    mean-and-spread summary across folds. The bundle is deterministic:
    identical config and data give byte-identical tables.
    """
    rows = read_manifest(config.manifest)
    issues = validate_manifest(rows, base_dir=config.base_dir)
    if issues:
        head = "; ".join(f"{i.code}@{i.row}" for i in issues[:5])
        raise InvalidManifest(
            f"manifest failed validation with {len(issues)} issue(s): {head}",
            issues=issues)

    ds = assemble_dataset(rows, config, cache_dir=cache_dir)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as f:
        yaml.safe_dump(config.as_dict(), f, sort_keys=True)

    speaker_ids = [r["speaker_id"] for r in ds.rows]
    first_col = f"{config.scale}_{attribute_names(config.scale)[0]}"
    first_scores = [float(r[first_col]) for r in ds.rows]
    plan = make_splits(speaker_ids, first_scores, mode=config.split,
                       seed=config.seed)
    _write_csv(out / "split.csv",
               [{"speaker_id": s, "assignment": plan.assignment[s]}
                for s in sorted(plan.assignment)],
               ("speaker_id", "assignment"))

    if config.split == "holdout":
        run = _run_one_split(
            ds, _train_indices(ds, plan.train_speakers),
            _test_indices(ds, plan.test_speakers), config, out)
        return ExperimentResult(config=config, out_dir=out, runs=[run],
                                summary=[])

    runs = []
    for k in range(5):
        test_spk = plan.fold_speakers(k)
        train_spk = [s for s in sorted(plan.assignment) if s not in set(test_spk)]
        runs.append(_run_one_split(
            ds, _train_indices(ds, train_spk), _test_indices(ds, test_spk),
            config, out / f"fold{k}"))
    summary = _cv_summary([r.metrics for r in runs], config.scale)
    if summary:
        columns = list(summary[0].keys())
        _write_csv(out / "cv_summary.csv", summary, columns)
        (out / "cv_summary.txt").write_text(
            _format_text_table(summary, columns))
    return ExperimentResult(config=config, out_dir=out, runs=runs,
                            summary=summary)
