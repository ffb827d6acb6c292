"""Command-line front end: attack runs, cross-model evaluation, bounds export.

Exit codes are a stable contract: 0 success, 1 runtime failure after the run
has started, 2 usage or configuration error detected during setup. Attack
output directories hold metrics.csv, perturbation.bin, periodic and final
perturbation PNGs, an attack grid, a convergence chart, and a resumable
checkpoint. With ``UAP_DETERMINISTIC_CLOCK`` set, wall-clock columns are
written as zero so repeated seeded runs are byte-identical.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import click
import tomli

from . import __version__
from .data import (
    DatasetSource,
    bound_sample,
    head_batch,
    load_dataset,
    synthetic_dataset,
)
from .engine import GaConfig, run
from .errors import ConfigError, ShapeError, UapError
from .oracle import ClassifierOracle, load_linear_oracle, load_onnx_oracle
from .reporting import (
    append_record,
    export_attack_grid,
    export_perturbation_image,
    render_convergence_svg,
)
from .tensors import (
    DEFAULT_NORMALIZATION,
    NormalizationSpec,
    Perturbation,
    apply_perturbation,
    compute_bounds,
    load_perturbation,
    renormalize_batch,
    save_perturbation,
)


@dataclass(frozen=True)
class RunManifest:
    """Everything cmd_attack needs, resolved from the command line."""

    config: Path
    dataset: str
    oracle: str
    out: Path
    seed: int | None = None
    force: bool = False


_GA_FIELDS = {f.name: f for f in dataclasses.fields(GaConfig)}
_SYNTH_INT_KEYS = ("num_classes", "n", "image_size", "seed", "batch_size")
_SYNTH_FLOAT_KEYS = ("mean_spread", "noise_scale", "ridge")


def load_run_config(path: str | Path) -> tuple[GaConfig, int, NormalizationSpec | None]:
    """Parse run.toml into (GaConfig, batch_size, normalization override).

    Top-level keys mirror GaConfig fields; ``batch_size`` sets the dataset
    batch size; an optional ``[normalization]`` table overrides mean/std for
    non-ONNX oracles. Unknown keys are rejected rather than ignored.
    """
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc

    unknown = set(doc) - set(_GA_FIELDS) - {"batch_size", "normalization"}
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s): {', '.join(sorted(unknown))}")

    overrides = {}
    for name, value in doc.items():
        if name in ("batch_size", "normalization"):
            continue
        field = _GA_FIELDS[name]
        if field.default is None or isinstance(field.default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: key '{name}' must be a number, got {value!r}")
            overrides[name] = float(value)
        elif isinstance(field.default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: key '{name}' must be an integer, got {value!r}")
            overrides[name] = value
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{path}: key '{name}' must be a string, got {value!r}")
            overrides[name] = value

    batch_size = doc.get("batch_size", 64)
    if isinstance(batch_size, bool) or not isinstance(batch_size, int) or batch_size < 1:
        raise ConfigError(f"{path}: batch_size must be a positive integer")

    norm = None
    if "normalization" in doc:
        table = doc["normalization"]
        if not isinstance(table, dict) or set(table) != {"mean", "std"}:
            raise ConfigError(f"{path}: [normalization] must define exactly mean and std")
        mean, std = table["mean"], table["std"]
        if len(mean) != 3 or len(std) != 3:
            raise ConfigError(f"{path}: normalization mean/std must have 3 entries each")
        if any(s <= 0 for s in std):
            raise ConfigError(f"{path}: normalization std entries must be positive")
        norm = NormalizationSpec(mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std))

    try:
        cfg = GaConfig(**overrides)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg, batch_size, norm


def _parse_synthetic_spec(spec: str) -> dict:
    """'synthetic' or 'synthetic:key=value,...' into synthetic_dataset kwargs."""
    params: dict = {"num_classes": 3, "n": 256, "image_size": 16, "seed": 7}
    body = spec[len("synthetic") :].lstrip(":")
    for piece in filter(None, body.split(",")):
        if "=" not in piece:
            raise ConfigError(f"synthetic dataset spec: expected key=value, got '{piece}'")
        key, _, raw = piece.partition("=")
        try:
            if key in _SYNTH_INT_KEYS:
                params[key] = int(raw)
            elif key in _SYNTH_FLOAT_KEYS:
                params[key] = float(raw)
            else:
                raise ConfigError(
                    f"synthetic dataset spec: unknown key '{key}' "
                    f"(known: {', '.join(_SYNTH_INT_KEYS + _SYNTH_FLOAT_KEYS)})"
                )
        except ValueError as exc:
            raise ConfigError(f"synthetic dataset spec: bad value for '{key}': {raw}") from exc
    return params


def load_oracle_spec(spec: str) -> ClassifierOracle | None:
    """Resolve an oracle spec string; None means 'use the synthetic pair'."""
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        if rest:
            raise ConfigError("oracle spec 'synthetic' takes no arguments")
        return None
    if kind == "onnx":
        model_path, sep, meta_path = rest.partition(":")
        if not model_path or not sep or not meta_path:
            raise ConfigError(
                f"oracle spec '{spec}': expected onnx:<model.onnx>:<descriptor.json>"
            )
        return load_onnx_oracle(model_path, meta_path)
    if kind == "linear":
        if not rest:
            raise ConfigError(f"oracle spec '{spec}': expected linear:<weights.bin>")
        return load_linear_oracle(rest)
    raise ConfigError(f"oracle spec '{spec}': unknown kind '{kind}' (use onnx, linear, synthetic)")


def resolve_attack_inputs(
    manifest: RunManifest, batch_size: int, norm_override: NormalizationSpec | None
) -> tuple[DatasetSource, ClassifierOracle]:
    """Pair the dataset with the oracle, agreeing on one normalization."""
    oracle = load_oracle_spec(manifest.oracle)
    if manifest.dataset.partition(":")[0] == "synthetic":
        params = _parse_synthetic_spec(manifest.dataset)
        params.setdefault("batch_size", batch_size)
        if norm_override is not None:
            params["normalization"] = norm_override
        source, paired = synthetic_dataset(**params)
        if oracle is None:
            oracle = paired
    else:
        if oracle is None:
            raise ConfigError(
                "oracle 'synthetic' requires a synthetic dataset spec "
                "(the pair is generated together)"
            )
        norm = getattr(oracle, "normalization", None) or norm_override or DEFAULT_NORMALIZATION
        source = load_dataset(manifest.dataset, batch_size=batch_size, normalization=norm)
    expected = (3,) + tuple(source.image_size)
    if oracle.input_shape != expected:
        raise ConfigError(
            f"oracle input shape {oracle.input_shape} does not match dataset images {expected}"
        )
    return source, oracle


def _threads_from_env() -> int:
    raw = os.environ.get("UAP_THREADS", "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"UAP_THREADS must be an integer, got '{raw}'") from exc
    if value < 1:
        raise ConfigError(f"UAP_THREADS must be >= 1, got {value}")
    return value


def cmd_attack(manifest: RunManifest) -> int:
    try:
        cfg, batch_size, norm_override = load_run_config(manifest.config)
        if manifest.seed is not None:
            cfg = dataclasses.replace(cfg, rng_seed=manifest.seed)
        source, oracle = resolve_attack_inputs(manifest, batch_size, norm_override)
        n_workers = _threads_from_env()
        out = Path(manifest.out)
        out.mkdir(parents=True, exist_ok=True)
        final_bin = out / "perturbation.bin"
        if final_bin.exists() and not manifest.force:
            raise ConfigError(
                f"{out} already holds a completed run ({final_bin.name}); "
                "pass --force to overwrite"
            )
    except UapError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2

    metrics = out / "metrics.csv"
    norm = source.normalization
    clock = (lambda: 0.0) if os.environ.get("UAP_DETERMINISTIC_CLOCK") else None

    def reporter(record, best):
        append_record(metrics, record)
        if record.generation % cfg.checkpoint_period == 0:
            export_perturbation_image(
                best, norm, out / f"perturbation_g{record.generation:04d}.png"
            )

    try:
        metrics.unlink(missing_ok=True)
        final_bin.unlink(missing_ok=True)
        result = run(
            oracle,
            source,
            cfg,
            reporter=reporter,
            checkpoint_path=out / "checkpoint.npz",
            n_workers=n_workers,
            clock=clock,
        )
        save_perturbation(result.best, final_bin)
        export_perturbation_image(result.best, norm, out / "perturbation.png")
        render_convergence_svg(result.history, out / "convergence.svg")
        grid_rows = min(4, source.n)
        grid_cols = max(1, min(4, source.n // grid_rows))
        export_attack_grid(
            head_batch(source, grid_rows * grid_cols),
            result.best,
            norm,
            out / "attack_grid.png",
            rows=grid_rows,
            cols=grid_cols,
        )
    except KeyboardInterrupt:
        click.echo("interrupted; latest checkpoint retained", err=True)
        return 1
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    final = result.best_report
    click.echo(
        f"terminated: {result.termination_reason} after {len(result.history)} generations"
    )
    click.echo(
        f"best gamma {final.gamma:.4f}, l2(255) {final.l2_255:.1f}, "
        f"mse(255) {final.mse_255:.1f}, epsilon {final.epsilon:.1f}"
    )
    click.echo(f"artifacts in {out}")
    return 0


def cmd_eval(
    perturbation: Path,
    oracle_specs: list[str],
    dataset: str,
    n_images: int,
    full: bool,
) -> int:
    try:
        delta = load_perturbation(perturbation)
        oracles = []
        for spec in oracle_specs:
            oracle = load_oracle_spec(spec)
            if oracle is None:
                raise ConfigError("cmd_eval needs concrete oracles (onnx or linear)")
            if oracle.input_shape != delta.shape:
                raise ShapeError(
                    f"perturbation shape {delta.shape} does not match model "
                    f"'{spec}' input shape {oracle.input_shape}"
                )
            oracles.append((spec, oracle))
        source = load_dataset(dataset, batch_size=64, normalization=DEFAULT_NORMALIZATION)
        count = source.n if full else min(n_images, source.n)
        head = head_batch(source, count)
    except UapError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2

    rows = []
    try:
        for spec, oracle in oracles:
            o_norm = getattr(oracle, "normalization", None) or DEFAULT_NORMALIZATION
            batch = renormalize_batch(head, source.normalization, o_norm)
            clean = oracle.accuracy(batch)
            attacked = oracle.accuracy(apply_perturbation(batch, delta, o_norm))
            kind, _, rest = spec.partition(":")
            label = Path(rest.partition(":")[0]).name if rest else kind
            rows.append((label, clean, attacked, clean - attacked))
        out_csv = perturbation.parent / "eval.csv"
        with open(out_csv, "w") as fh:
            fh.write("model,clean_accuracy,attacked_accuracy,drop\n")
            for label, clean, attacked, drop in rows:
                fh.write(f"{label},{clean:.9g},{attacked:.9g},{drop:.9g}\n")
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    width = max(len(r[0]) for r in rows)
    click.echo(f"{'model'.ljust(width)}  clean   attacked  drop")
    for label, clean, attacked, drop in rows:
        click.echo(f"{label.ljust(width)}  {clean:.4f}  {attacked:.4f}    {drop:+.4f}")
    click.echo(f"({count} images; results in {out_csv})")
    return 0


def cmd_bounds(dataset: str, sample_batches: int, out: Path) -> int:
    try:
        if sample_batches < 1:
            raise ConfigError(f"sample-batches must be >= 1, got {sample_batches}")
        source = load_dataset(dataset, batch_size=64, normalization=DEFAULT_NORMALIZATION)
    except UapError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2

    try:
        if sample_batches > source.num_batches:
            click.echo(
                f"warning: {sample_batches} batches requested but dataset has "
                f"{source.num_batches}; using the whole dataset",
                err=True,
            )
        bounds = compute_bounds(bound_sample(source, sample_batches))
        save_perturbation(Perturbation(bounds.upper), out)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        return 1

    click.echo(
        f"bounds over {min(sample_batches, source.num_batches)} batch(es) "
        f"of {source.n} images -> {out} (max sigma {bounds.upper.max():.6f})"
    )
    return 0


@click.group()
@click.version_option(version=__version__, prog_name="uap")
def main():
    """Universal adversarial perturbation toolkit."""


@main.command("attack")
@click.option("--config", required=True, type=click.Path(path_type=Path), help="Run config TOML.")
@click.option("--dataset", required=True, help="Manifest CSV path or synthetic:<k=v,...> spec.")
@click.option("--oracle", required=True, help="onnx:<model>:<meta>, linear:<weights>, or synthetic.")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config's rng_seed.")
@click.option("--force", is_flag=True, help="Overwrite a completed run in --out.")
def attack_command(config, dataset, oracle, out, seed, force):
    """Evolve a universal perturbation against one classifier."""
    raise SystemExit(
        cmd_attack(RunManifest(config=config, dataset=dataset, oracle=oracle, out=out, seed=seed, force=force))
    )


@main.command("eval")
@click.option(
    "--perturbation", required=True, type=click.Path(path_type=Path), help="perturbation.bin file."
)
@click.option(
    "--oracle", "oracles", required=True, multiple=True, help="Oracle spec; repeat per model."
)
@click.option("--dataset", required=True, help="Manifest CSV path.")
@click.option("--n", "n_images", type=int, default=512, show_default=True, help="Images evaluated.")
@click.option("--full", is_flag=True, help="Evaluate the entire manifest instead of --n.")
def eval_command(perturbation, oracles, dataset, n_images, full):
    """Report clean vs attacked accuracy for each model."""
    raise SystemExit(cmd_eval(perturbation, list(oracles), dataset, n_images, full))


@main.command("bounds")
@click.option("--dataset", required=True, help="Manifest CSV path.")
@click.option("--sample-batches", type=int, default=8, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output bounds file.")
def bounds_command(dataset, sample_batches, out):
    """Export per-pixel perturbation bounds derived from the dataset."""
    raise SystemExit(cmd_bounds(dataset, sample_batches, out))


if __name__ == "__main__":
    main()
