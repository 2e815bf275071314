"""Run summaries and side-by-side comparison of metrics CSV files."""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from aptsbench.pipeline import ERROR_EPOCH, MEAN_SEED, ExperimentResult

LOG = logging.getLogger(__name__)

ACCURACY_TARGET = 0.9


class AlignmentError(ValueError):
    """Raised when metrics files cannot be compared epoch by epoch."""


@dataclass(frozen=True)
class MeanCurve:
    """Per-epoch mean loss and accuracy read from one metrics file."""

    label: str
    path: Path
    loss: dict[int, float]
    accuracy: dict[int, float]

    @property
    def epochs(self) -> tuple[int, ...]:
        return tuple(sorted(self.loss))

    def crossing_epoch(self, target: float = ACCURACY_TARGET) -> int | None:
        return next((epoch for epoch in self.epochs if self.accuracy[epoch] >= target), None)


@dataclass(frozen=True)
class ComparisonReport:
    text: str
    crossings: dict[str, int | None]
    differing_epochs: tuple[int, ...]


def read_mean_curve(path: Path, label: str | None = None) -> MeanCurve:
    loss: dict[int, float] = {}
    accuracy: dict[int, float] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            if row["epoch"] == ERROR_EPOCH:
                raise AlignmentError(f"{path} records a failed run (seed {row['seed']})")
            if row["seed"] != MEAN_SEED:
                continue
            epoch = int(row["epoch"])
            loss[epoch] = float(row["train_loss"])
            accuracy[epoch] = float(row["train_accuracy"])
    if not loss:
        raise AlignmentError(f"{path} has no mean rows")
    return MeanCurve(label=label or path.stem, path=path, loss=loss, accuracy=accuracy)


def compare_report(paths: Sequence[Path]) -> ComparisonReport:
    """
    Align the mean curves of several runs and render them as a text table.

    Every file must cover the same epochs. The report flags the first epoch at which each run
    reaches 90% training accuracy and every epoch where the runs disagree.
    """
    if len(paths) < 2:
        raise AlignmentError("comparison needs at least two metrics files")
    curves = [read_mean_curve(path, _label(path, paths)) for path in paths]
    grid = curves[0].epochs
    for curve in curves[1:]:
        if curve.epochs != grid:
            missing = sorted(set(grid) ^ set(curve.epochs))
            raise AlignmentError(
                f"{curve.path} and {curves[0].path} disagree on epochs {missing}",
            )

    differing = tuple(
        epoch
        for epoch in grid
        if len({(curve.loss[epoch], curve.accuracy[epoch]) for curve in curves}) > 1
    )
    crossings = {curve.label: curve.crossing_epoch() for curve in curves}

    table = Table(title="Mean training curves", show_lines=False)
    table.add_column("epoch", justify="right")
    for curve in curves:
        table.add_column(f"{curve.label} loss", justify="right")
        table.add_column(f"{curve.label} acc", justify="right")
    table.add_column("diff", justify="center")
    for epoch in grid:
        cells = [str(epoch)]
        for curve in curves:
            marker = "*" if crossings[curve.label] == epoch else ""
            cells.extend((f"{curve.loss[epoch]:.6f}", f"{curve.accuracy[epoch]:.4f}{marker}"))
        cells.append("x" if epoch in differing else "")
        table.add_row(*cells)

    console = Console(width=200, force_terminal=False, color_system=None)
    with console.capture() as capture:
        console.print(table)
        for label, epoch in crossings.items():
            reached = f"epoch {epoch}" if epoch is not None else "never"
            console.print(f"{label}: {ACCURACY_TARGET:.0%} accuracy reached at {reached}")
        console.print(f"{len(differing)} of {len(grid)} epochs differ")
    text = capture.get()
    LOG.debug("Compared %d files over %d epochs", len(curves), len(grid))
    return ComparisonReport(text=text, crossings=crossings, differing_epochs=differing)


def emit_summary(result: ExperimentResult, console: Console | None = None) -> None:
    console = console or Console()
    final = result.final_mean
    lines = [
        f"Final mean loss: {final.train_loss:.6f}",
        f"Final mean accuracy: {final.train_accuracy:.4f}",
        f"Metrics: {result.output}",
    ]
    console.print(Panel(Text("\n".join(lines)), title="Run summary", border_style="cyan"))


def _label(path: Path, paths: Sequence[Path]) -> str:
    stems = [candidate.stem for candidate in paths]
    if stems.count(path.stem) == 1:
        return path.stem
    return f"{path.parent.name}/{path.stem}"
