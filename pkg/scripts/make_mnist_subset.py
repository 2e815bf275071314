"""Cut a small subset out of a full MNIST IDX pair."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import typer
from numpy.typing import NDArray

from aptsbench.config import data_root
from aptsbench.data.idx import IMAGE_MAGIC, LABEL_MAGIC, read_idx, write_idx

app = typer.Typer(help="Write the first K images of an MNIST IDX pair, or the first N per class.")


def select_balanced(labels: NDArray[np.uint8], per_class: int) -> NDArray[np.int64]:
    """Indices of the first ``per_class`` samples of every label, in file order."""
    picked: list[int] = []
    counts: dict[int, int] = {}
    for index, label in enumerate(labels.tolist()):
        if counts.get(label, 0) < per_class:
            counts[label] = counts.get(label, 0) + 1
            picked.append(index)
    return np.asarray(picked, dtype=np.int64)


@app.command()
def main(
    images: Path = typer.Argument(..., exists=True, dir_okay=False, help="Image IDX file."),
    labels: Path = typer.Argument(..., exists=True, dir_okay=False, help="Label IDX file."),
    count: int = typer.Option(1000, "--count", min=1, help="Leading samples kept."),
    per_class: int | None = typer.Option(
        None,
        "--per-class",
        min=1,
        help="Keep the first N samples of every digit instead of the first K overall.",
    ),
    output_dir: Path | None = typer.Option(
        None,
        "--output-dir",
        help="Destination directory (defaults to the data root's mnist-subset folder).",
    ),
) -> None:
    pixels = read_idx(images, expected_magic=IMAGE_MAGIC)
    targets = read_idx(labels, expected_magic=LABEL_MAGIC)
    if pixels.shape[0] != targets.shape[0]:
        typer.secho(
            f"{pixels.shape[0]} images but {targets.shape[0]} labels",
            fg=typer.colors.RED,
        )
        raise typer.Exit(code=1)

    if per_class is not None:
        rows = select_balanced(targets, per_class)
    elif count > targets.shape[0]:
        typer.secho(
            f"asked for {count} samples but the files hold {targets.shape[0]}",
            fg=typer.colors.RED,
        )
        raise typer.Exit(code=1)
    else:
        rows = np.arange(count, dtype=np.int64)
    destination = output_dir or data_root() / "mnist-subset"
    images_out = write_idx(destination / "images.idx", pixels[rows])
    labels_out = write_idx(destination / "labels.idx", targets[rows])
    typer.echo(f"Wrote {rows.size} samples to {images_out} and {labels_out}")


if __name__ == "__main__":
    app()
