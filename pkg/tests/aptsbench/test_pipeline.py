from __future__ import annotations

import csv
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from aptsbench.config import RunConfig, data_root
from aptsbench.errors import NonFiniteError
from aptsbench.pipeline import (
    CSV_COLUMNS,
    ERROR_EPOCH,
    MEAN_SEED,
    VALIDATION_COLUMNS,
    ExperimentError,
    MetricsRow,
    mean_rows,
    run_experiment,
)


MOONS_RUN: dict[str, Any] = {
    "samples": 1000,
    "batch_size": 50,
    "epochs": 50,
    "seeds": [0, 1, 2, 3, 4],
}


def _config(tmp_path: Path, **overrides: Any) -> RunConfig:
    values: dict[str, Any] = {
        "optimizer": "adam",
        "dataset": "two_moons",
        "samples": 40,
        "hidden_sizes": [4],
        "batch_size": 20,
        "epochs": 2,
        "seeds": [0],
        "output": tmp_path / "metrics.csv",
    }
    values.update(overrides)
    return RunConfig(**values)


def _read_rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_zero_epochs__writes_only_the_initial_evaluation(tmp_path: Path) -> None:
    result = run_experiment(_config(tmp_path, epochs=0))

    rows = _read_rows(result.output)
    assert [(row["seed"], row["epoch"]) for row in rows] == [("0", "0"), (MEAN_SEED, "0")]
    assert rows[0]["accepted_ratio"] == "0"


@pytest.mark.parametrize("optimizer", ["apts", "iapts", "tr", "adam", "sgd"])
def test_every_optimizer__writes_one_row_per_seed_and_epoch(
    tmp_path: Path,
    optimizer: str,
) -> None:
    config = _config(tmp_path, optimizer=optimizer, seeds=[0, 1], subdomain_count=2)

    result = run_experiment(config)

    rows = _read_rows(result.output)
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert len(rows) == 2 * 3 + 3
    for row in rows:
        assert 0.0 <= float(row["train_accuracy"]) <= 1.0
        assert np.isfinite(float(row["train_loss"]))
        assert float(row["delta_G"]) > 0.0
        assert row["wall_time_s"] == ""
    assert result.final_mean.epoch == 2


def test_identical_seeds__produce_mean_rows_equal_to_each_seed(tmp_path: Path) -> None:
    result = run_experiment(_config(tmp_path, seeds=[3, 3]))

    rows = _read_rows(result.output)
    per_seed = {row["epoch"]: row for row in rows if row["seed"] == "3"}
    for row in rows:
        if row["seed"] == MEAN_SEED:
            expected = per_seed[row["epoch"]]
            assert row["train_loss"] == expected["train_loss"]
            assert row["train_accuracy"] == expected["train_accuracy"]


def test_repeated_runs__write_byte_identical_csv(tmp_path: Path) -> None:
    settings: dict[str, Any] = {"optimizer": "apts", "n_jobs": 2}

    first = run_experiment(_config(tmp_path, output=tmp_path / "a.csv", **settings))
    second = run_experiment(_config(tmp_path, output=tmp_path / "b.csv", **settings))

    assert first.output.read_bytes() == second.output.read_bytes()


def test_validation_split__adds_held_out_columns(tmp_path: Path) -> None:
    result = run_experiment(_config(tmp_path, validation_fraction=0.25, epochs=1))

    rows = _read_rows(result.output)
    assert list(rows[0]) == list(CSV_COLUMNS + VALIDATION_COLUMNS)
    assert all(row["val_accuracy"] != "" for row in rows)


def test_timing__records_wall_time(tmp_path: Path) -> None:
    result = run_experiment(_config(tmp_path, timing=True, epochs=1))

    epoch_one = [row for row in _read_rows(result.output) if row["epoch"] == "1"]
    assert all(float(row["wall_time_s"]) >= 0.0 for row in epoch_one)


def test_failing_optimizer__leaves_an_error_marker(
    tmp_path: Path,
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    def exploding_step(*_args: Any) -> Any:
        raise NonFiniteError("gradient is not finite")

    monkeypatch.setattr("aptsbench.pipeline.adam_step", exploding_step)
    config = _config(tmp_path, seeds=[5])

    with pytest.raises(ExperimentError) as excinfo:
        run_experiment(config)

    rows = _read_rows(config.output)
    assert excinfo.value.seed == 5
    assert excinfo.value.epoch == 1
    assert rows[-1]["seed"] == "5"
    assert rows[-1]["epoch"] == ERROR_EPOCH


def test_mean_rows__leave_optional_columns_blank_when_any_seed_lacks_them() -> None:
    rows = [
        MetricsRow("0", 1, 0.2, 0.8, 0.1, 1.0, wall_time_s=1.0),
        MetricsRow("1", 1, 0.4, 0.6, 0.3, 0.5, wall_time_s=None),
    ]

    (mean,) = mean_rows(rows)

    assert mean.seed == MEAN_SEED
    assert mean.train_loss == pytest.approx(0.3)
    assert mean.accepted_ratio == pytest.approx(0.75)
    assert mean.wall_time_s is None
    assert mean.as_csv(CSV_COLUMNS)["wall_time_s"] == ""


@pytest.mark.slow
@pytest.mark.parametrize(
    ("hidden_sizes", "blocks"),
    [([32, 32], 2), ([32, 32, 32], 4)],
)
def test_two_moons__inexact_apts_matches_adam(
    tmp_path: Path,
    hidden_sizes: list[int],
    blocks: int,
) -> None:
    common: dict[str, Any] = {**MOONS_RUN, "hidden_sizes": hidden_sizes}
    adam = run_experiment(_config(tmp_path, output=tmp_path / "adam.csv", **common))
    iapts = run_experiment(
        _config(
            tmp_path,
            optimizer="iapts",
            subdomain_count=blocks,
            output=tmp_path / "iapts.csv",
            **common,
        ),
    )

    assert adam.final_mean.epoch == iapts.final_mean.epoch == 50
    assert adam.final_mean.train_accuracy >= 0.95
    assert iapts.final_mean.train_accuracy >= 0.95
    assert abs(iapts.final_mean.train_accuracy - adam.final_mean.train_accuracy) <= 0.03


@pytest.mark.slow
def test_threaded_inexact_apts__reruns_byte_for_byte(tmp_path: Path) -> None:
    common: dict[str, Any] = {
        **MOONS_RUN,
        "epochs": 10,
        "optimizer": "iapts",
        "hidden_sizes": [32, 32, 32],
        "subdomain_count": 4,
    }

    first = run_experiment(_config(tmp_path, output=tmp_path / "first.csv", **common))
    second = run_experiment(_config(tmp_path, output=tmp_path / "second.csv", **common))

    assert first.output.read_bytes() == second.output.read_bytes()


@pytest.mark.slow
def test_mnist_subset__inexact_apts_matches_adam(tmp_path: Path) -> None:
    subset = data_root(create=False) / "mnist-subset"
    images, labels = subset / "images.idx", subset / "labels.idx"
    if not (images.is_file() and labels.is_file()):
        pytest.skip(f"no MNIST subset under {subset}; run scripts/make_mnist_subset.py")
    common: dict[str, Any] = {
        "dataset": "mnist_idx",
        "images_path": images,
        "labels_path": labels,
        "hidden_sizes": [32, 32],
        "batch_size": 50,
        "epochs": 50,
        "seeds": [0, 1, 2, 3, 4],
    }

    adam = run_experiment(_config(tmp_path, output=tmp_path / "adam.csv", **common))
    iapts = run_experiment(
        _config(tmp_path, optimizer="iapts", output=tmp_path / "iapts.csv", **common),
    )

    assert adam.final_mean.train_accuracy >= 0.9
    assert iapts.final_mean.train_accuracy >= 0.9
    assert abs(iapts.final_mean.train_accuracy - adam.final_mean.train_accuracy) <= 0.03
