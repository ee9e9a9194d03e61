"""Dataset manifest: the CSV that ties audio, embeddings, and ratings.

One row per utterance. Score columns exist for both rating scales and may
be empty; noise/SNR/role columns describe augmented copies. Validation
returns a list of issues rather than raising, so a whole file can be
audited in one pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError

CAPEV_ATTRIBUTES = ("severity", "roughness", "breathiness", "strain",
                    "pitch", "loudness")
GRBAS_ATTRIBUTES = ("grade", "roughness", "breathiness", "asthenia", "strain")
SCALE_RANGES = {"capev": (0.0, 100.0), "grbas": (0.0, 3.0)}

_REQUIRED = ("utterance_id", "speaker_id", "wav_path")
_NUMERIC_EXTRA = ("snr_db",)

COLUMNS = (
    "utterance_id", "speaker_id", "wav_path", "vqes_path", "subset", "split",
    *(f"capev_{a}" for a in CAPEV_ATTRIBUTES),
    *(f"grbas_{a}" for a in GRBAS_ATTRIBUTES),
    "noise_kind", "snr_db", "role",
)


def score_columns(scale: str) -> list:
    """Column names of one rating scale, in attribute order."""
    if scale == "capev":
        return [f"capev_{a}" for a in CAPEV_ATTRIBUTES]
    if scale == "grbas":
        return [f"grbas_{a}" for a in GRBAS_ATTRIBUTES]
    raise ConfigError(f"unknown rating scale {scale!r}")


def attribute_names(scale: str) -> list:
    if scale == "capev":
        return list(CAPEV_ATTRIBUTES)
    if scale == "grbas":
        return list(GRBAS_ATTRIBUTES)
    raise ConfigError(f"unknown rating scale {scale!r}")


_SCORE_COLUMNS = set(score_columns("capev")) | set(score_columns("grbas"))


def read_manifest(path) -> list:
    """Load rows as dicts; empty cells become None, numbers become floats."""
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            row = {}
            for k, v in raw.items():
                if v is None or v == "":
                    row[k] = None
                elif k in _SCORE_COLUMNS or k in _NUMERIC_EXTRA:
                    row[k] = float(v)
                else:
                    row[k] = v
            rows.append(row)
    return rows


def write_manifest(path, rows) -> None:
    """Write rows with the canonical column order; None becomes empty."""
    extra = []
    for r in rows:
        for k in r:
            if k not in COLUMNS and k not in extra:
                extra.append(k)
    names = list(COLUMNS) + extra
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k, ""))
                        for k in names})


@dataclass
class Issue:
    """One validation finding; row is 1-based over data rows."""

    code: str
    row: Optional[int]
    message: str


def labels_from_row(row: dict, scale: str) -> Optional[np.ndarray]:
    """The row's rating vector on one scale, or None if incomplete."""
    vals = [row.get(c) for c in score_columns(scale)]
    if any(v is None for v in vals):
        return None
    return np.array([float(v) for v in vals])


def validate_manifest(rows, base_dir=".") -> list:
    """Check every manifest invariant; returns [] iff the file is clean."""
    base = Path(base_dir)
    issues = []
    seen_ids = {}
    for n, row in enumerate(rows, start=1):
        missing = [c for c in _REQUIRED if c not in row]
        if missing:
            issues.append(Issue("MISSING_COLUMN", n,
                                f"missing required columns {missing}"))
            continue
        uid = row["utterance_id"]
        if not uid:
            issues.append(Issue("MISSING_ID", n, "empty utterance_id"))
        elif uid in seen_ids:
            issues.append(Issue(
                "DUPLICATE_ID", n,
                f"utterance_id {uid!r} already used on row {seen_ids[uid]}"))
        else:
            seen_ids[uid] = n
        if not row.get("speaker_id"):
            issues.append(Issue("MISSING_SPEAKER", n, "empty speaker_id"))
        wav = row.get("wav_path")
        if not wav or not (base / wav).exists():
            issues.append(Issue("MISSING_FILE", n,
                                f"wav_path {wav!r} does not exist"))
        vqes = row.get("vqes_path")
        if vqes and not (base / vqes).exists():
            issues.append(Issue("MISSING_VQES", n,
                                f"vqes_path {vqes!r} does not exist"))
        subset = row.get("subset")
        if subset not in (None, "A", "S"):
            issues.append(Issue("BAD_SUBSET", n,
                                f"subset must be A or S, got {subset!r}"))
        for scale, (lo, hi) in SCALE_RANGES.items():
            for col in score_columns(scale):
                v = row.get(col)
                if v is None:
                    continue
                try:
                    v = float(v)
                except (TypeError, ValueError):
                    issues.append(Issue("BAD_SCORE", n,
                                        f"{col} is not numeric: {v!r}"))
                    continue
                if not lo <= v <= hi:
                    issues.append(Issue(
                        "OUT_OF_RANGE", n,
                        f"{col}={v} outside [{lo:g}, {hi:g}]"))
    return issues
