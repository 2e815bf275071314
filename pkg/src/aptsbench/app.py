"""Command-line entry point for aptsbench."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np
import typer
from rich.console import Console

from aptsbench.config import ConfigError, load_config
from aptsbench.data.idx import IdxFormatError
from aptsbench.errors import DomainError
from aptsbench.models.network import Activation, MlpSpec, init_params
from aptsbench.models.objectives import NetworkObjective, check_gradient
from aptsbench.pipeline import ExperimentError, run_experiment
from aptsbench.reporting.report import AlignmentError, compare_report, emit_summary

app = typer.Typer(help="aptsbench: additively preconditioned trust-region training benchmarks.")

GRADCHECK_TOLERANCE = 1e-5


def _configure_logging(level: str) -> None:
    numeric_level = getattr(logging, level.upper(), None)
    if not isinstance(numeric_level, int):
        raise typer.BadParameter(
            f"Unknown logging level '{level}'.",
            param_hint="--log-level",
        )
    logging.basicConfig(
        level=numeric_level,
        format="%(asctime)s %(levelname)s %(name)s :: %(message)s",
    )


@app.callback()
def main(
    log_level: str = typer.Option("INFO", "--log-level", help="Logging level (DEBUG, INFO, ...)."),
) -> None:
    """Train, compare and check the optimizers."""
    _configure_logging(log_level)


def _parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise typer.BadParameter(
            f"Cannot parse seeds '{raw}'; expected e.g. '0,1,2'.",
            param_hint="--seed-override",
        ) from exc
    if not seeds:
        raise typer.BadParameter("At least one seed is required.", param_hint="--seed-override")
    return seeds


@app.command()
def run(
    config_file: Path = typer.Argument(
        ...,
        help="Experiment file with one 'key = value' setting per line.",
        exists=True,
        file_okay=True,
        dir_okay=False,
        readable=True,
        resolve_path=True,
    ),
    seed_override: str | None = typer.Option(
        None,
        "--seed-override",
        help="Comma-separated seeds replacing the configured list.",
    ),
    epochs: int | None = typer.Option(None, "--epochs", min=0, help="Number of epochs."),
    output: Path | None = typer.Option(None, "--output", "-o", help="Metrics CSV path."),
) -> None:
    """Train one optimizer over every seed and write the metrics CSV."""
    overrides: dict[str, Any] = {
        "seeds": _parse_seeds(seed_override) if seed_override is not None else None,
        "epochs": epochs,
        "output": output,
    }
    try:
        config = load_config(config_file, overrides)
    except (OSError, ConfigError) as exc:
        raise typer.BadParameter(str(exc), param_hint="CONFIG_FILE") from exc

    logging.getLogger(__name__).info("Starting %s run from %s", config.optimizer, config_file)
    try:
        result = run_experiment(config)
    except (ExperimentError, DomainError, IdxFormatError, OSError) as exc:
        typer.secho(str(exc), fg=typer.colors.RED)
        raise typer.Exit(code=1) from exc
    emit_summary(result)
    final = result.final_mean
    typer.echo(
        f"final mean accuracy={final.train_accuracy:.4f} loss={final.train_loss:.6f} "
        f"-> {result.output}",
    )


@app.command()
def compare(
    csv_files: list[Path] = typer.Argument(
        ...,
        help="Two or more metrics CSV files written by 'run'.",
        exists=True,
        file_okay=True,
        dir_okay=False,
        readable=True,
    ),
) -> None:
    """Print aligned mean curves and the epoch each run first reaches 90% accuracy."""
    try:
        report = compare_report(csv_files)
    except AlignmentError as exc:
        typer.secho(str(exc), fg=typer.colors.RED)
        raise typer.Exit(code=1) from exc
    typer.echo(report.text)


@app.command()
def gradcheck(
    model: str = typer.Argument(..., help="Layer widths such as '2-16-16-2'."),
    activation: Activation = typer.Option(
        Activation.TANH,
        "--activation",
        help="Hidden-layer activation.",
    ),
    seed: int = typer.Option(0, "--seed", help="Seed for parameters and random data."),
    samples: int = typer.Option(8, "--samples", min=1, help="Random batch size."),
    tolerance: float = typer.Option(GRADCHECK_TOLERANCE, "--tolerance", help="Max relative error."),
) -> None:
    """Compare backpropagation against central finite differences."""
    if activation is Activation.SOFTMAX_CE:
        raise typer.BadParameter("softmax_ce is an output head.", param_hint="--activation")
    try:
        spec = MlpSpec.parse(model, hidden=activation)
    except (DomainError, ValueError) as exc:
        raise typer.BadParameter(str(exc), param_hint="MODEL") from exc

    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(samples, spec.input_dim))
    labels = rng.integers(0, spec.output_dim, size=samples)
    objective = NetworkObjective(spec=spec, inputs=inputs, targets=labels)
    theta = init_params(spec, seed)
    error = check_gradient(objective, theta)

    console = Console()
    status = "ok" if error <= tolerance else "FAILED"
    console.print(
        f"{model} ({spec.param_count} parameters, {activation.value}): "
        f"relative error {error:.3e} [{status}]",
        markup=False,
    )
    if error > tolerance:
        raise typer.Exit(code=1)


if __name__ == "__main__":  # pragma: no cover
    app()
