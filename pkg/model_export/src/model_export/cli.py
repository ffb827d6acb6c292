"""Command-line front end for one-shot model exports."""

from pathlib import Path

import click

from . import __version__
from .export import ExportError, ExportSpec, SpecError, export_model


@click.command()
@click.version_option(version=__version__, prog_name="export-model")
@click.option("--model", "model_name", required=True, help="googlenet, resnet50, or vit_b_16.")
@click.option("--opset", default=13, show_default=True, type=int, help="ONNX opset to declare (>= 13).")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output ONNX path.")
@click.option("--meta", required=True, type=click.Path(path_type=Path), help="Output descriptor JSON path.")
@click.option(
    "--weights",
    type=click.Choice(["pretrained", "random"]),
    default="pretrained",
    show_default=True,
    help="'random' uses a seeded offline init instead of downloading weights.",
)
@click.option("--seed", default=0, show_default=True, type=int, help="Seed for --weights random.")
def main(model_name: str, opset: int, out: Path, meta: Path, weights: str, seed: int):
    """Convert a torchvision classifier to ONNX plus its preprocessing descriptor."""
    try:
        spec = ExportSpec(
            model_name=model_name, out=out, meta=meta, opset=opset, weights=weights, seed=seed
        )
    except SpecError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(2)
    try:
        out_path, meta_path = export_model(spec)
    except ExportError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(1)
    click.echo(f"wrote {out_path} and {meta_path} (logit parity verified)")


if __name__ == "__main__":
    main()
