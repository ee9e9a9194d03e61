"""Command-line surface tying the pipeline together.

Subcommands: validate, lld, augment, train, eval, run, report. Exit
codes: 0 success, 1 data problems (bad manifests, missing stacks, failed
measurements), 2 configuration errors, 3 anything else. The VOQA_CACHE_DIR
environment variable, when set, caches descriptor measurements across
invocations.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import click
import numpy as np

from .errors import (
    ConfigError,
    FileError,
    InsufficientSpeakers,
    InvalidManifest,
    VoqaError,
)
from .experiment import (
    ExperimentConfig,
    _evaluate_split,
    _format_text_table,
    _metric_columns,
    _write_csv,
    _FIT_COLUMNS,
    assemble_dataset,
    descriptor_row,
    impute_missing_llds,
    run_experiment,
)
from .manifest import (
    attribute_names,
    read_manifest,
    validate_manifest,
    write_manifest,
)
from .network import load_checkpoint, ModelConfig
from .noise import build_augmented_set, default_noise_protocol
from .training import TrainConfig, train


def _cache_dir():
    value = os.environ.get("VOQA_CACHE_DIR")
    return Path(value) if value else None


def _guarded(f):
    """Map toolkit exceptions onto the documented exit codes."""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (ConfigError, InsufficientSpeakers) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except VoqaError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
        except click.exceptions.Exit:
            raise
        except Exception as e:  # anything unplanned is a runtime failure
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            sys.exit(3)
    return wrapper


def _resolve_base(manifest_path, base_dir):
    return Path(base_dir) if base_dir else Path(manifest_path).parent


_SUBSET_OPTION = click.option(
    "--subset", "subsets", multiple=True, type=click.Choice(["A", "S"]),
    help="Restrict to a subset; repeat for several. Default: both.")


@click.group()
@click.version_option(package_name="voqa")
def main():
    """Voice quality assessment toolkit."""


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--base-dir", type=click.Path(file_okay=False),
              help="Directory file paths resolve against (default: the manifest's).")
@_guarded
def validate(manifest, base_dir):
    """Check MANIFEST against every invariant; report issues as JSON."""
    rows = read_manifest(manifest)
    issues = validate_manifest(rows, base_dir=_resolve_base(manifest, base_dir))
    if not issues:
        click.echo(f"ok: {len(rows)} rows, no issues")
        return
    click.echo(json.dumps(
        {"issues": [{"code": i.code, "row": i.row, "message": i.message}
                    for i in issues]},
        indent=2, sort_keys=True))
    sys.exit(1)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--base-dir", type=click.Path(file_okay=False))
@click.option("--cpp", is_flag=True, help="Also measure cepstral peak prominence.")
@click.option("--out", type=click.Path(dir_okay=False),
              help="Output CSV path (default: stdout).")
@_guarded
def lld(manifest, base_dir, cpp, out):
    """Extract acoustic descriptors for every utterance in MANIFEST."""
    base = _resolve_base(manifest, base_dir)
    cache = _cache_dir()
    names = ["jitter_local", "shimmer_local", "hnr_db"] + (["cpp_db"] if cpp else [])
    columns = ["utterance_id", "subset"] + names + ["missing"]
    table = []
    for row in read_manifest(manifest):
        subset = row.get("subset") or "S"
        arr = descriptor_row(base / row["wav_path"], subset, cpp, cache)
        rec = {"utterance_id": row["utterance_id"], "subset": subset,
               "missing": int(arr[-1] > 0.5)}
        rec.update({n: float(v) for n, v in zip(names, arr[:-1])})
        table.append(rec)
    if out:
        _write_csv(out, table, columns)
        click.echo(f"wrote {len(table)} descriptor rows to {out}")
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=columns)
        w.writeheader()
        w.writerows(table)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--base-dir", type=click.Path(file_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False),
              help="Where noisy files go; must sit under the base directory "
                   "(default: <base>/noisy).")
@click.option("--out-manifest", type=click.Path(dir_okay=False),
              help="Augmented manifest path (default: alongside MANIFEST).")
@click.option("--seed", type=int, default=0, show_default=True)
@_guarded
def augment(manifest, base_dir, out_dir, out_manifest, seed):
    """Mix every clean utterance with the full noise-robustness grid."""
    base = _resolve_base(manifest, base_dir)
    rows = read_manifest(manifest)
    issues = validate_manifest(rows, base_dir=base)
    if issues:
        raise InvalidManifest(
            f"manifest failed validation with {len(issues)} issue(s)",
            issues=issues)
    out_dir = Path(out_dir) if out_dir else base / "noisy"
    new_rows = build_augmented_set(rows, default_noise_protocol(), out_dir,
                                   base, seed)
    out_manifest = Path(out_manifest) if out_manifest else \
        Path(manifest).with_name(Path(manifest).stem + ".augmented.csv")
    write_manifest(out_manifest, new_rows)
    click.echo(f"wrote {len(new_rows)} rows ({len(new_rows) - len(rows)} "
               f"augmented) to {out_manifest}")


def _train_options(f):
    defaults = TrainConfig()
    for args in reversed([
        ("--epochs", int, defaults.epochs),
        ("--learning-rate", float, defaults.learning_rate),
        ("--weight-decay", float, defaults.weight_decay),
        ("--beta", float, defaults.beta),
        ("--batch-size", int, defaults.batch_size),
        ("--dropout", float, defaults.dropout),
        ("--seed", int, defaults.seed),
        ("--attn-dim", int, defaults.attn_dim),
    ]):
        f = click.option(args[0], type=args[1], default=args[2],
                         show_default=True)(f)
    return click.option(
        "--hidden", default=",".join(str(h) for h in defaults.hidden),
        show_default=True, help="Comma-separated backbone widths.")(f)


def _train_config(epochs, learning_rate, weight_decay, beta, batch_size,
                  dropout, seed, attn_dim, hidden):
    try:
        widths = tuple(int(h) for h in hidden.split(","))
    except ValueError:
        raise ConfigError(f"--hidden must be comma-separated integers, got {hidden!r}")
    return TrainConfig(
        epochs=epochs, learning_rate=learning_rate, weight_decay=weight_decay,
        beta=beta, batch_size=batch_size, dropout=dropout, seed=seed,
        hidden=widths, attn_dim=attn_dim)


@main.command(name="train")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--scale", type=click.Choice(["capev", "grbas"]),
              default="capev", show_default=True)
@click.option("--feature-mode", default="sfm_ws+jsh", show_default=True)
@click.option("--base-dir", type=click.Path(file_okay=False))
@_SUBSET_OPTION
@_train_options
@_guarded
def train_cmd(manifest, out_dir, scale, feature_mode, base_dir, subsets,
              **train_kwargs):
    """Train one model on every labeled training-role row of MANIFEST."""
    config = ExperimentConfig(
        manifest=Path(manifest), out_dir=Path(out_dir), scale=scale,
        feature_mode=feature_mode, subsets=subsets or ("A", "S"),
        base_dir=_resolve_base(manifest, base_dir),
        train=_train_config(**train_kwargs))
    rows = read_manifest(config.manifest)
    issues = validate_manifest(rows, base_dir=config.base_dir)
    if issues:
        raise InvalidManifest(
            f"manifest failed validation with {len(issues)} issue(s)",
            issues=issues)
    ds = assemble_dataset(rows, config, cache_dir=_cache_dir())
    train_idx = [i for i, r in enumerate(ds.rows)
                 if r.get("role") in (None, "", "clean", "train_seen")]
    impute_missing_llds(ds, train_idx)
    result = train([ds.samples[i] for i in train_idx], [], config.train,
                   feature_mode=config.feature_mode, out_dir=config.out_dir)
    click.echo(f"trained on {len(train_idx)} utterances; "
               f"checkpoints in {config.out_dir}")
    click.echo(f"final train loss: {result.history[-1]['train_loss']:.6f}")


@main.command(name="eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--scale", type=click.Choice(["capev", "grbas"]),
              default="capev", show_default=True)
@click.option("--base-dir", type=click.Path(file_okay=False))
@_SUBSET_OPTION
@_guarded
def eval_cmd(checkpoint, manifest, out_dir, scale, base_dir, subsets):
    """Evaluate a trained CHECKPOINT over every labeled row of MANIFEST."""
    params, meta = load_checkpoint(checkpoint)
    result = SimpleNamespace(
        params=params,
        model_config=ModelConfig.from_dict(meta["model_config"]),
        lld_mean=(None if meta.get("lld_mean") is None
                  else np.asarray(meta["lld_mean"])),
        lld_std=(None if meta.get("lld_std") is None
                 else np.asarray(meta["lld_std"])),
    )
    config = ExperimentConfig(
        manifest=Path(manifest), out_dir=Path(out_dir), scale=scale,
        feature_mode=meta.get("feature_mode", "sfm_ws+jsh"),
        subsets=subsets or ("A", "S"),
        base_dir=_resolve_base(manifest, base_dir))
    n_attrs = len(attribute_names(scale))
    if result.model_config.num_targets != n_attrs:
        raise ConfigError(
            f"checkpoint predicts {result.model_config.num_targets} attributes "
            f"but scale {scale} has {n_attrs}")
    rows = read_manifest(config.manifest)
    issues = validate_manifest(rows, base_dir=config.base_dir)
    if issues:
        raise InvalidManifest(
            f"manifest failed validation with {len(issues)} issue(s)",
            issues=issues)
    ds = assemble_dataset(rows, config, cache_dir=_cache_dir())
    # a failed measurement at scoring time falls back to the training mean
    if ds.lld_missing.any() and result.lld_mean is not None:
        for i in np.flatnonzero(ds.lld_missing):
            ds.samples[i] = replace(ds.samples[i],
                                    lld=result.lld_mean.copy())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics, fits = _evaluate_split(ds, list(range(len(ds.rows))), result,
                                    config, out)
    _write_csv(out / "metrics.csv", metrics, _metric_columns(scale))
    _write_csv(out / "fits.csv", fits, _FIT_COLUMNS)
    text = _format_text_table(metrics, _metric_columns(scale))
    (out / "metrics.txt").write_text(text)
    click.echo(text, nl=False)


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@_guarded
def run(config):
    """Execute a full experiment described by a CONFIG yaml file."""
    cfg = ExperimentConfig.from_yaml(config)
    result = run_experiment(cfg, cache_dir=_cache_dir())
    click.echo(f"bundle written to {result.out_dir}")
    if cfg.split == "cv5":
        click.echo(f"  5 folds; summary in {result.out_dir / 'cv_summary.csv'}")
        return
    for r in result.runs[0].metrics:
        if r["condition"] == "clean":
            pcc = "n/a" if r["pcc"] is None else f"{r['pcc']:.4f}"
            click.echo(f"  {r['subset']:>4} {r['level']:<9} "
                       f"rmse {r['rmse']:.4f}  pcc {pcc}")


@main.command()
@click.argument("bundle", type=click.Path(exists=True, file_okay=False))
@_guarded
def report(bundle):
    """Print the metric tables of an existing results bundle."""
    bundle = Path(bundle)
    printed = False
    for name in ("metrics.csv", "cv_summary.csv"):
        path = bundle / name
        if not path.exists():
            continue
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            click.echo(f"# {name}")
            click.echo(_format_text_table(rows, list(rows[0].keys())), nl=False)
            printed = True
    for fold in sorted(bundle.glob("fold*/metrics.csv")):
        with open(fold, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            click.echo(f"# {fold.parent.name}")
            click.echo(_format_text_table(rows, list(rows[0].keys())), nl=False)
            printed = True
    if not printed:
        raise FileError(f"{bundle} holds no metrics.csv or cv_summary.csv")


if __name__ == "__main__":
    main()
