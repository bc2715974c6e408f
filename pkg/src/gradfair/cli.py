"""Console script for gradfair."""

import contextlib
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import typer
from pydantic import Field
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

from gradfair.components.results import (
    history_frame,
    render_table,
    results_frame,
    write_results,
)
from gradfair.config import TrainConfig
from gradfair.data import (
    DatasetSpec,
    EncodedDataset,
    encode,
    frame_spec,
    load_table,
    packaged_spec,
    split,
    synth_biased,
)
from gradfair.harness import compare_models, lambda_sweep, run_experiment, save_checkpoint
from gradfair.types import GradBaseModel, Variant


logger = logging.getLogger(__name__)

app = typer.Typer(no_args_is_help=True)
console = Console()

MANIFEST = "manifest.json"
OUTPUT_ROOT_ENVVAR = "GRADFAIR_OUTPUT_ROOT"


class RunManifest(GradBaseModel):
    """Record of a completed command, written last."""

    command: str = Field(description="Command name")
    data: Optional[str] = Field(default=None, description="Dataset spec the run used")
    config: Optional[TrainConfig] = Field(default=None, description="Training configuration")
    output_dir: Path = Field(description="Output directory")
    files: list[str] = Field(default=[], description="Files emitted, relative to output_dir")

    def write(self) -> Path:
        filename = self.output_dir / MANIFEST
        filename.write_text(self.model_dump_json(indent=2, by_alias=True), encoding="utf-8")
        return filename


# =====================================================================================
# Argument parsing
# =====================================================================================
def parse_names(value: Optional[str]) -> list[str]:
    """Comma separated names, empty for None or ''."""
    if not value:
        return []
    return [name.strip() for name in value.split(",") if name.strip()]


def parse_floats(value: str, name: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise ValueError(f"Invalid {name} '{value}', expected comma separated numbers") from e


def parse_splits(value: str) -> tuple[float, float, float]:
    fractions = parse_floats(value, "splits")
    if len(fractions) != 3:
        raise ValueError(f"--splits needs three fractions a,b,c, got '{value}'")
    return tuple(fractions)


def parse_lambdas(value: str) -> list[float]:
    """Comma list '1,10,100' or log range 'log:<start>:<stop>:<num>'."""
    if value.startswith("log:"):
        parts = value.split(":")[1:]
        if len(parts) != 3:
            raise ValueError(f"Log range must read log:<start>:<stop>:<num>, got '{value}'")
        start, stop = float(parts[0]), float(parts[1])
        num = int(parts[2])
        if start <= 0 or stop <= 0 or num < 1:
            raise ValueError(f"Log range needs positive bounds and num >= 1, got '{value}'")
        lambdas = np.geomspace(start, stop, num).tolist()
    else:
        lambdas = parse_floats(value, "lambdas")
    if not lambdas:
        raise ValueError("The lambda list is empty")
    return lambdas


def resolve_spec(data: str, source: Optional[Path] = None) -> tuple[DatasetSpec, str]:
    """Spec from a YAML file or a packaged spec name such as 'adult'."""
    filename = Path(data) if Path(data).is_file() else packaged_spec(data)
    overrides = {} if source is None else dict(source=source.resolve())
    return DatasetSpec.from_yaml(filename, **overrides), str(filename)


def prepare_output(out: Optional[Path], out_root: Path, name: str) -> Path:
    """Output directory, refused if it already holds a manifest."""
    out = out_root / name if out is None else out
    if (out / MANIFEST).exists():
        raise ValueError(f"{out} already holds a completed run, choose another --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


@contextlib.contextmanager
def failures():
    """Report errors in red and exit with status 1."""
    try:
        yield
    except (ValueError, RuntimeError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        console.print(f"[red]Error: {escape(str(e))}[/red]", soft_wrap=True)
        raise typer.Exit(code=1)


def load_splits(
    data: str, source: Optional[Path], splits: str, seed: int
) -> tuple[tuple[EncodedDataset, EncodedDataset, EncodedDataset], DatasetSpec, str]:
    spec, spec_path = resolve_spec(data, source)
    dataset = encode(load_table(spec), spec)
    return split(dataset, parse_splits(splits), seed), spec, spec_path


# =====================================================================================
# Commands
# =====================================================================================
DATA_HELP = "Dataset spec file or packaged spec name (adult, german)"
OUT_HELP = "Output directory, by default <out-root>/<command>_<dataset>_seed<seed>"


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """Fair neural network training with gradient-reversed attribute branches."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.command("train")
def cmd_train(
    data: str = typer.Option(..., "--data", help=DATA_HELP),
    variant: Variant = typer.Option(Variant.PRED, "--variant", help="GRAD variant"),
    protected: str = typer.Option("", "--protected", help="Protected attributes a,b, empty for the NN baseline"),
    baseline: bool = typer.Option(False, "--baseline", help="Audit the protected attributes without branches"),
    lambda_: float = typer.Option(100.0, "--lambda", help="Attribute loss weight"),
    epochs: int = typer.Option(50, "--epochs", help="Training epochs"),
    batch_size: int = typer.Option(64, "--batch-size", help="Mini-batch size"),
    seed: int = typer.Option(0, "--seed", help="Seed of weights, splits and batches"),
    knn_k: int = typer.Option(5, "--knn-k", help="Neighbours of the consistency metric"),
    splits: str = typer.Option("0.5,0.2,0.3", "--splits", help="Train, validation, test fractions"),
    source: Optional[Path] = typer.Option(None, "--source", help="Override the spec data file"),
    out: Optional[Path] = typer.Option(None, "--out", help=OUT_HELP),
    out_root: Path = typer.Option(Path("runs"), "--out-root", envvar=OUTPUT_ROOT_ENVVAR),
):
    """Train, select and evaluate one model."""
    with failures():
        (train_ds, val_ds, test_ds), spec, spec_path = load_splits(data, source, splits, seed)
        cfg = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            lambda_=lambda_,
            knn_k=knn_k,
            rng_seed=seed,
            variant=variant,
            protected=parse_names(protected),
            adversaries=[] if baseline else None,
            splits=parse_splits(splits),
            dataset=spec.name,
        )
        outdir = prepare_output(out, out_root, f"train_{spec.name}_seed{seed}")
        result = run_experiment(cfg, train_ds, val_ds, test_ds)

        table = results_frame([result])
        files = [
            write_results(table, outdir / "results.csv"),
            write_results(history_frame(result), outdir / "history.csv"),
            save_checkpoint(result.snapshot, outdir / "checkpoint.gradfair"),
        ]
        console.print(render_table(table, title=f"{result.algorithm} on {spec.name}"))
        RunManifest(
            command="train",
            data=spec_path,
            config=cfg,
            output_dir=outdir,
            files=[f.name for f in files],
        ).write()


@app.command("sweep")
def cmd_sweep(
    data: str = typer.Option(..., "--data", help=DATA_HELP),
    lambdas: str = typer.Option(..., "--lambdas", help="'1,10,100' or 'log:<start>:<stop>:<num>'"),
    variant: Variant = typer.Option(Variant.PRED, "--variant", help="GRAD variant"),
    protected: str = typer.Option(..., "--protected", help="Protected attributes a,b"),
    epochs: int = typer.Option(50, "--epochs", help="Training epochs"),
    batch_size: int = typer.Option(64, "--batch-size", help="Mini-batch size"),
    seed: int = typer.Option(0, "--seed", help="Seed of weights, splits and batches"),
    knn_k: int = typer.Option(5, "--knn-k", help="Neighbours of the consistency metric"),
    splits: str = typer.Option("0.5,0.2,0.3", "--splits", help="Train, validation, test fractions"),
    source: Optional[Path] = typer.Option(None, "--source", help="Override the spec data file"),
    out: Optional[Path] = typer.Option(None, "--out", help=OUT_HELP),
    out_root: Path = typer.Option(Path("runs"), "--out-root", envvar=OUTPUT_ROOT_ENVVAR),
):
    """Train one model per lambda, writing a plot-ready sweep table."""
    with failures():
        values = parse_lambdas(lambdas)
        (train_ds, val_ds, test_ds), spec, spec_path = load_splits(data, source, splits, seed)
        cfg = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            knn_k=knn_k,
            rng_seed=seed,
            variant=variant,
            protected=parse_names(protected),
            splits=parse_splits(splits),
            dataset=spec.name,
        )
        outdir = prepare_output(out, out_root, f"sweep_{spec.name}_seed{seed}")
        sweep = lambda_sweep(cfg, values, train_ds, val_ds, test_ds)
        filename = write_results(sweep, outdir / "sweep.csv")
        console.print(render_table(sweep, title=f"Lambda sweep on {spec.name}"))
        RunManifest(
            command="sweep", data=spec_path, config=cfg, output_dir=outdir, files=[filename.name]
        ).write()


@app.command("compare")
def cmd_compare(
    data: str = typer.Option(..., "--data", help=DATA_HELP),
    protected: str = typer.Option(..., "--protected", help="Protected attributes a,b"),
    ablate: bool = typer.Option(False, "--ablate", help="Add rows protecting one attribute at a time"),
    lambda_: float = typer.Option(100.0, "--lambda", help="Attribute loss weight"),
    epochs: int = typer.Option(50, "--epochs", help="Training epochs"),
    batch_size: int = typer.Option(64, "--batch-size", help="Mini-batch size"),
    seed: int = typer.Option(0, "--seed", help="Seed of weights, splits and batches"),
    knn_k: int = typer.Option(5, "--knn-k", help="Neighbours of the consistency metric"),
    splits: str = typer.Option("0.5,0.2,0.3", "--splits", help="Train, validation, test fractions"),
    source: Optional[Path] = typer.Option(None, "--source", help="Override the spec data file"),
    out: Optional[Path] = typer.Option(None, "--out", help=OUT_HELP),
    out_root: Path = typer.Option(Path("runs"), "--out-root", envvar=OUTPUT_ROOT_ENVVAR),
):
    """NN and GRAD models, Auto and Pred variants, on identical splits."""
    with failures():
        (train_ds, val_ds, test_ds), spec, spec_path = load_splits(data, source, splits, seed)
        cfg = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            lambda_=lambda_,
            knn_k=knn_k,
            rng_seed=seed,
            protected=parse_names(protected),
            splits=parse_splits(splits),
            dataset=spec.name,
        )
        outdir = prepare_output(out, out_root, f"compare_{spec.name}_seed{seed}")
        results = compare_models(cfg, train_ds, val_ds, test_ds, ablate=ablate)
        table = results_frame(results)
        files = [write_results(table, outdir / "compare.csv")]
        for result in results:
            files.append(save_checkpoint(result.snapshot, outdir / f"{result.algorithm}.gradfair"))
        console.print(render_table(table, title=f"Comparison on {spec.name}"))
        RunManifest(
            command="compare",
            data=spec_path,
            config=cfg,
            output_dir=outdir,
            files=[f.name for f in files],
        ).write()


@app.command("synth")
def cmd_synth(
    n: int = typer.Option(5000, "--n", help="Number of rows, at least 100"),
    d: int = typer.Option(10, "--d", help="Number of features"),
    bias: str = typer.Option("0.8", "--bias", help="Bias per protected attribute, e.g. 0.8,0.8"),
    seed: int = typer.Option(0, "--seed", help="Generator seed"),
    out: Optional[Path] = typer.Option(None, "--out", help=OUT_HELP),
    out_root: Path = typer.Option(Path("runs"), "--out-root", envvar=OUTPUT_ROOT_ENVVAR),
):
    """Write a synthetic biased dataset and its spec."""
    with failures():
        dataset = synth_biased(n, d, parse_floats(bias, "bias"), rng_seed=seed)
        outdir = prepare_output(out, out_root, f"synth_seed{seed}")
        csvfile = outdir / "synthetic.csv"
        dataset.to_frame().to_csv(csvfile, index=False, encoding="utf-8")
        specfile = frame_spec(dataset, csvfile.name).write_yaml(outdir / "synthetic.yml")
        summary = pd.DataFrame(
            dict(attribute=dataset.protected, bias=parse_floats(bias, "bias"))
        )
        console.print(render_table(summary, title=f"{n} rows, {d} features in {outdir}"))
        RunManifest(
            command="synth", output_dir=outdir, files=[csvfile.name, specfile.name]
        ).write()


if __name__ == "__main__":
    app()
