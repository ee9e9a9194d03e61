"""Batch export of embedding stacks for every row of a manifest.

The exporter's whole interface to the downstream toolkit is files: one
.vqes per manifest row, a summary JSON, and a manifest copy whose
vqes_path column points at the new stacks. Everything lands in the
job's output directory, ready to hand to the consumer as one unit.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .audio import load_for_model
from .container import check_vqes, write_vqes
from .errors import BadManifest, ExportConfigError
from .models import hidden_stacks, input_rate, load_encoder

_REQUIRED_COLUMNS = ("utterance_id", "wav_path")


@dataclass(frozen=True)
class ExportJob:
    model_name: str
    manifest_path: Path
    output_dir: Path
    device: str = "cpu"
    batch_size: int = 8
    base_dir: Optional[Path] = None   # wav paths resolve here (default: manifest dir)

    def __post_init__(self):
        object.__setattr__(self, "manifest_path", Path(self.manifest_path))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if self.base_dir is not None:
            object.__setattr__(self, "base_dir", Path(self.base_dir))
        if self.batch_size < 1:
            raise ExportConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ExportSummary:
    model_tag: str
    model_type: str
    num_layers: int
    dim: int
    frame_hop_s: float
    sample_rate: int
    n_files: int
    output_dir: str
    manifest_out: str
    files: list = field(default_factory=list)


def _read_manifest(path: Path) -> tuple[list, list]:
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            columns = reader.fieldnames or []
            rows = list(reader)
    except FileNotFoundError:
        raise BadManifest(f"manifest not found: {path}")
    missing = [c for c in _REQUIRED_COLUMNS if c not in columns]
    if missing:
        raise BadManifest(f"manifest lacks required columns: {', '.join(missing)}")
    if not rows:
        raise BadManifest(f"manifest has no rows: {path}")
    seen = set()
    for r in rows:
        uid = (r.get("utterance_id") or "").strip()
        if not uid:
            raise BadManifest("manifest row with empty utterance_id")
        if uid in seen:
            raise BadManifest(f"duplicate utterance_id {uid!r} would collide "
                              f"on the exported file name")
        seen.add(uid)
    return columns, rows


def export_stacks(job: ExportJob) -> ExportSummary:
    """Run one export job; returns the summary that is also written to disk."""
    columns, rows = _read_manifest(job.manifest_path)
    base = job.base_dir if job.base_dir is not None else job.manifest_path.parent
    enc = load_encoder(job.model_name, job.device)
    rate = input_rate(enc)
    job.output_dir.mkdir(parents=True, exist_ok=True)

    waves = [(r["utterance_id"], load_for_model(base / r["wav_path"], rate))
             for r in rows]

    # equal-length groups batch without padding, so a stack's bytes never
    # depend on which clips happened to share its batch
    by_length: dict = {}
    for uid, w in waves:
        by_length.setdefault(len(w), []).append((uid, w))
    stacks = {}
    for _, group in sorted(by_length.items()):
        for i in range(0, len(group), job.batch_size):
            chunk = group[i:i + job.batch_size]
            arrays = hidden_stacks(enc, [w for _, w in chunk])
            for (uid, _), arr in zip(chunk, arrays):
                stacks[uid] = arr

    out_files = []
    for r in rows:
        uid = r["utterance_id"]
        out_path = job.output_dir / f"{uid}.vqes"
        write_vqes(out_path, stacks[uid], model_tag=enc.tag)
        check_vqes(out_path)
        out_files.append(str(out_path))

    # the copy lives with the stacks and every path resolves against it,
    # so one source manifest can feed several exports without collisions
    manifest_out = job.output_dir / (job.manifest_path.stem + ".with_stacks.csv")
    out_columns = list(columns) if "vqes_path" in columns else list(columns) + ["vqes_path"]
    with open(manifest_out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=out_columns)
        writer.writeheader()
        for r in rows:
            new = dict(r)
            new["wav_path"] = os.path.relpath(base / r["wav_path"],
                                              job.output_dir)
            new["vqes_path"] = f"{r['utterance_id']}.vqes"
            writer.writerow(new)

    summary = ExportSummary(
        model_tag=enc.tag, model_type=enc.model_type,
        num_layers=enc.num_layers, dim=enc.dim,
        frame_hop_s=enc.frame_hop_s, sample_rate=rate,
        n_files=len(out_files), output_dir=str(job.output_dir),
        manifest_out=str(manifest_out), files=out_files,
    )
    with open(job.output_dir / "export_summary.json", "w") as f:
        json.dump(asdict(summary), f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
