"""Seeded training runs and per-epoch metrics for the benchmark harness."""

from __future__ import annotations

import csv
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, TextIO

import numpy as np

from aptsbench.config import DatasetId, OptimizerId, RunConfig
from aptsbench.data.datasets import BatchSchedule, Dataset, batches, two_moons
from aptsbench.data.idx import load_idx
from aptsbench.models.network import Activation, MlpSpec, init_params
from aptsbench.models.objectives import FULL, BatchRef, NetworkObjective
from aptsbench.numeric import ParamVector
from aptsbench.optim.apts import AptsState, apts_iteration
from aptsbench.optim.baselines import init_momentum, sgd_momentum_step
from aptsbench.optim.cadam import adam_step, init_cadam
from aptsbench.optim.decomposition import PartitionStrategy, make_partition
from aptsbench.optim.iapts import iapts_iteration, layer_partition, make_blocks
from aptsbench.optim.trust_region import init_tr_state, tr_step

LOG = logging.getLogger(__name__)

CSV_COLUMNS = (
    "seed",
    "epoch",
    "train_loss",
    "train_accuracy",
    "delta_G",
    "accepted_ratio",
    "wall_time_s",
)
VALIDATION_COLUMNS = ("val_loss", "val_accuracy")
MEAN_SEED = "mean"
ERROR_EPOCH = "error"


class ExperimentError(RuntimeError):
    """Raised when an optimizer fails; the CSV already holds an error marker row."""

    def __init__(self, seed: int, epoch: int, reason: str) -> None:
        super().__init__(f"seed {seed}, epoch {epoch}: {reason}")
        self.seed = seed
        self.epoch = epoch


@dataclass(frozen=True)
class MetricsRow:
    seed: str
    epoch: int
    train_loss: float
    train_accuracy: float
    delta_G: float
    accepted_ratio: float
    wall_time_s: float | None = None
    val_loss: float | None = None
    val_accuracy: float | None = None

    def as_csv(self, columns: tuple[str, ...]) -> dict[str, str]:
        values = {
            "seed": self.seed,
            "epoch": str(self.epoch),
            "train_loss": _fmt(self.train_loss),
            "train_accuracy": _fmt(self.train_accuracy),
            "delta_G": _fmt(self.delta_G),
            "accepted_ratio": _fmt(self.accepted_ratio),
            "wall_time_s": _fmt(self.wall_time_s),
            "val_loss": _fmt(self.val_loss),
            "val_accuracy": _fmt(self.val_accuracy),
        }
        return {column: values[column] for column in columns}


@dataclass(frozen=True)
class ExperimentResult:
    output: Path
    rows: list[MetricsRow] = field(default_factory=list)

    @property
    def final_mean(self) -> MetricsRow:
        return next(row for row in reversed(self.rows) if row.seed == MEAN_SEED)


class Trainer(Protocol):
    """One optimizer bound to one objective; ``step`` reports whether the update was kept."""

    @property
    def theta(self) -> ParamVector: ...

    @property
    def radius(self) -> float: ...

    def step(self, batch: BatchRef) -> bool: ...


class AptsTrainer:
    def __init__(self, cfg: RunConfig, objective: NetworkObjective, theta0: ParamVector) -> None:
        self._objective = objective
        self._cfg = cfg.apts_config()
        self._partition = make_partition(
            objective.dim,
            PartitionStrategy.EVEN_BLOCKS,
            self._cfg.subdomain_count,
        )
        self._state = AptsState(theta=theta0, delta=self._cfg.tr.clamp(cfg.delta_init))

    @property
    def theta(self) -> ParamVector:
        return self._state.theta

    @property
    def radius(self) -> float:
        return self._state.delta

    def step(self, batch: BatchRef) -> bool:
        self._state, record = apts_iteration(
            self._objective,
            self._state,
            self._cfg,
            self._partition,
            batch,
        )
        return record.accepted


class IaptsTrainer:
    def __init__(self, cfg: RunConfig, objective: NetworkObjective, theta0: ParamVector) -> None:
        self._objective = objective
        self._cfg = cfg.iapts_config()
        self._partition = layer_partition(objective, self._cfg.subdomain_count)
        self._blocks = make_blocks(objective, self._partition)
        self._state = AptsState(theta=theta0, delta=self._cfg.lr_init)

    @property
    def theta(self) -> ParamVector:
        return self._state.theta

    @property
    def radius(self) -> float:
        return self._state.delta

    def step(self, batch: BatchRef) -> bool:
        self._state, record = iapts_iteration(
            self._objective,
            self._state,
            self._cfg,
            self._partition,
            batch,
            blocks=self._blocks,
        )
        return record.accepted


class TrTrainer:
    def __init__(self, cfg: RunConfig, objective: NetworkObjective, theta0: ParamVector) -> None:
        self._objective = objective
        self._params = cfg.tr_params()
        self._state = init_tr_state(objective, theta0, cfg.delta_init, self._params)

    @property
    def theta(self) -> ParamVector:
        return self._state.theta

    @property
    def radius(self) -> float:
        return self._state.delta

    def step(self, batch: BatchRef) -> bool:
        self._state = tr_step(self._objective, self._state, self._params, batch)
        return self._state.history[-1].accepted


class AdamTrainer:
    def __init__(self, cfg: RunConfig, objective: NetworkObjective, theta0: ParamVector) -> None:
        self._objective = objective
        self._theta = theta0
        self._state = init_cadam(objective.dim, _baseline_lr(cfg))

    @property
    def theta(self) -> ParamVector:
        return self._theta

    @property
    def radius(self) -> float:
        return self._state.lr

    def step(self, batch: BatchRef) -> bool:
        _, grad = self._objective.evaluate(self._theta, batch)
        update, self._state = adam_step(self._state, grad)
        self._theta = self._theta + update
        return True


class SgdTrainer:
    def __init__(self, cfg: RunConfig, objective: NetworkObjective, theta0: ParamVector) -> None:
        self._objective = objective
        self._theta = theta0
        self._state = init_momentum(objective.dim, _baseline_lr(cfg), cfg.momentum)

    @property
    def theta(self) -> ParamVector:
        return self._theta

    @property
    def radius(self) -> float:
        return self._state.lr

    def step(self, batch: BatchRef) -> bool:
        _, grad = self._objective.evaluate(self._theta, batch)
        update, self._state = sgd_momentum_step(self._state, grad)
        self._theta = self._theta + update
        return True


TrainerFactory = Callable[[RunConfig, NetworkObjective, ParamVector], Trainer]

TRAINERS: dict[OptimizerId, TrainerFactory] = {
    OptimizerId.APTS: AptsTrainer,
    OptimizerId.IAPTS: IaptsTrainer,
    OptimizerId.TR: TrTrainer,
    OptimizerId.ADAM: AdamTrainer,
    OptimizerId.SGD: SgdTrainer,
}


def build_optimizer(cfg: RunConfig, objective: NetworkObjective, theta0: ParamVector) -> Trainer:
    return TRAINERS[cfg.optimizer](cfg, objective, theta0)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is DatasetId.MNIST_IDX:
        if cfg.images_path is None or cfg.labels_path is None:  # pragma: no cover - validated
            raise ValueError("mnist_idx needs images_path and labels_path")
        return load_idx(cfg.images_path, cfg.labels_path, limit=cfg.limit, seed=cfg.data_seed)
    return two_moons(cfg.samples, cfg.noise, cfg.data_seed)


def build_model(cfg: RunConfig, dataset: Dataset) -> MlpSpec:
    return MlpSpec.build(
        dataset.feature_count,
        cfg.hidden_sizes,
        dataset.num_classes,
        hidden=cfg.activation,
        head=Activation.SOFTMAX_CE,
    )


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """
    Train once per seed and write per-seed plus per-epoch mean rows to ``cfg.output``.

    Rows are flushed as they are produced. When an optimizer fails, an error marker row is
    written before ``ExperimentError`` propagates.
    """
    dataset = load_dataset(cfg)
    train, validation = dataset.split(cfg.validation_fraction, cfg.data_seed)
    spec = build_model(cfg, train)
    objective = NetworkObjective(spec=spec, inputs=train.inputs, targets=train.labels)
    held_out = (
        NetworkObjective(spec=spec, inputs=validation.inputs, targets=validation.labels)
        if validation is not None
        else None
    )
    columns = CSV_COLUMNS + (VALIDATION_COLUMNS if held_out is not None else ())
    LOG.info(
        "Training %s on %s (%d samples, %d parameters) for %d epochs over seeds %s",
        cfg.optimizer.value,
        train.name,
        train.sample_count,
        spec.param_count,
        cfg.epochs,
        cfg.seeds,
    )

    cfg.output.parent.mkdir(parents=True, exist_ok=True)
    rows: list[MetricsRow] = []
    with cfg.output.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        handle.flush()
        for seed in cfg.seeds:
            seed_rows = _run_seed(cfg, seed, objective, held_out, train, writer, handle, columns)
            rows.extend(seed_rows)
        means = mean_rows(rows)
        for row in means:
            writer.writerow(row.as_csv(columns))
        rows.extend(means)

    result = ExperimentResult(output=cfg.output, rows=rows)
    final = result.final_mean
    LOG.info(
        "Final mean over %d seeds: loss=%.6f accuracy=%.4f",
        len(cfg.seeds),
        final.train_loss,
        final.train_accuracy,
    )
    return result


def _run_seed(
    cfg: RunConfig,
    seed: int,
    objective: NetworkObjective,
    held_out: NetworkObjective | None,
    train: Dataset,
    writer: csv.DictWriter[str],
    handle: TextIO,
    columns: tuple[str, ...],
) -> list[MetricsRow]:
    theta0 = init_params(objective.spec, seed)
    schedule = BatchSchedule(batch_size=cfg.batch_size, mode=cfg.batch_mode, seed=seed)
    rows: list[MetricsRow] = []
    epoch = 0
    try:
        trainer = build_optimizer(cfg, objective, theta0)
        rows.append(_evaluate(cfg, seed, 0, trainer, objective, held_out, 0.0, None))
        writer.writerow(rows[-1].as_csv(columns))
        handle.flush()
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            schedule_batches = batches(train, schedule, epoch)
            accepted = sum(trainer.step(batch) for batch in schedule_batches)
            elapsed = time.perf_counter() - started if cfg.timing else None
            ratio = accepted / len(schedule_batches)
            row = _evaluate(cfg, seed, epoch, trainer, objective, held_out, ratio, elapsed)
            rows.append(row)
            writer.writerow(row.as_csv(columns))
            handle.flush()
            LOG.debug(
                "seed %d epoch %d: loss=%.6f accuracy=%.4f delta=%.3e accepted=%.2f",
                seed,
                epoch,
                row.train_loss,
                row.train_accuracy,
                row.delta_G,
                ratio,
            )
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        LOG.error(
            "Optimizer %s failed for seed %d at epoch %d: %s", cfg.optimizer, seed, epoch, exc
        )
        marker = {column: "" for column in columns}
        marker.update({"seed": str(seed), "epoch": ERROR_EPOCH})
        writer.writerow(marker)
        handle.flush()
        raise ExperimentError(seed, epoch, str(exc)) from exc
    LOG.info(
        "seed %d finished: loss=%.6f accuracy=%.4f",
        seed,
        rows[-1].train_loss,
        rows[-1].train_accuracy,
    )
    return rows


def _evaluate(
    cfg: RunConfig,
    seed: int,
    epoch: int,
    trainer: Trainer,
    objective: NetworkObjective,
    held_out: NetworkObjective | None,
    accepted_ratio: float,
    elapsed: float | None,
) -> MetricsRow:
    theta = trainer.theta
    loss, _ = objective.evaluate(theta, FULL)
    val_loss = val_accuracy = None
    if held_out is not None:
        val_loss, _ = held_out.evaluate(theta, FULL)
        val_accuracy = held_out.accuracy(theta)
    return MetricsRow(
        seed=str(seed),
        epoch=epoch,
        train_loss=loss,
        train_accuracy=objective.accuracy(theta),
        delta_G=trainer.radius,
        accepted_ratio=accepted_ratio,
        wall_time_s=elapsed if cfg.timing else None,
        val_loss=val_loss,
        val_accuracy=val_accuracy,
    )


def mean_rows(rows: list[MetricsRow]) -> list[MetricsRow]:
    """Average the per-seed rows epoch by epoch; optional columns stay blank when any is."""
    by_epoch: dict[int, list[MetricsRow]] = {}
    for row in rows:
        if row.seed != MEAN_SEED:
            by_epoch.setdefault(row.epoch, []).append(row)
    return [
        MetricsRow(
            seed=MEAN_SEED,
            epoch=epoch,
            train_loss=float(np.mean([row.train_loss for row in group])),
            train_accuracy=float(np.mean([row.train_accuracy for row in group])),
            delta_G=float(np.mean([row.delta_G for row in group])),
            accepted_ratio=float(np.mean([row.accepted_ratio for row in group])),
            wall_time_s=_optional_mean([row.wall_time_s for row in group]),
            val_loss=_optional_mean([row.val_loss for row in group]),
            val_accuracy=_optional_mean([row.val_accuracy for row in group]),
        )
        for epoch, group in sorted(by_epoch.items())
    ]


def _optional_mean(values: list[float | None]) -> float | None:
    if any(value is None for value in values):
        return None
    return float(np.mean([value for value in values if value is not None]))


def _baseline_lr(cfg: RunConfig) -> float:
    if cfg.lr is None:  # pragma: no cover - filled by RunConfig
        raise ValueError(f"{cfg.optimizer.value} needs a learning rate")
    return cfg.lr


def _fmt(value: float | None) -> str:
    return "" if value is None else format(value, ".12g")
