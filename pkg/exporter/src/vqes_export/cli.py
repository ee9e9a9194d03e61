"""Command line: one model, one manifest, one output directory.

Exit codes: 0 success; 1 data problem (manifest or audio); 2 model or
configuration problem; 3 unexpected failure.
"""

import sys

import click

from .errors import ExportConfigError, ExportError, ModelResolutionError
from .export import ExportJob, export_stacks


@click.command()
@click.argument("model_name")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--out-dir", required=True,
              type=click.Path(file_okay=False), help="Where .vqes files go.")
@click.option("--base-dir", type=click.Path(file_okay=False, exists=True),
              default=None,
              help="Directory wav paths resolve against (default: the manifest's).")
@click.option("--device", default="cpu", show_default=True,
              help="Inference device hint.")
@click.option("--batch-size", default=8, show_default=True)
@click.version_option(package_name="vqes-export")
def main(model_name, manifest, out_dir, base_dir, device, batch_size):
    """Export per-layer hidden states of MODEL_NAME for every row of
    MANIFEST as one .vqes stack file per utterance."""
    try:
        job = ExportJob(model_name=model_name, manifest_path=manifest,
                        output_dir=out_dir, device=device,
                        batch_size=batch_size, base_dir=base_dir)
        summary = export_stacks(job)
    except (ModelResolutionError, ExportConfigError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except ExportError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    except Exception as e:  # pragma: no cover - defensive
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        sys.exit(3)
    click.echo(
        f"exported {summary.n_files} stacks ({summary.num_layers} layers x "
        f"{summary.dim} dims, {1000 * summary.frame_hop_s:g} ms hop) "
        f"from {summary.model_tag} to {summary.output_dir}")
    click.echo(f"manifest with stack paths: {summary.manifest_out}")


if __name__ == "__main__":
    main()
