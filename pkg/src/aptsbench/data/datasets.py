"""Labelled datasets, the two-moons generator and epoch batching."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from aptsbench.errors import DimensionError, DomainError
from aptsbench.models.objectives import FULL, BatchRef

LOG = logging.getLogger(__name__)


class BatchMode(StrEnum):
    SEQUENTIAL = "sequential"
    SHUFFLED = "shuffled"
    FULL = "full"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable ``(inputs, labels)`` pair; labels are integer classes in ``[0, num_classes)``."""

    inputs: NDArray[np.float64]
    labels: NDArray[np.int64]
    name: str
    seed: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise DimensionError(f"inputs must be a matrix, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DimensionError(
                f"{self.inputs.shape[0]} input rows but labels have shape {self.labels.shape}",
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")

    @property
    def sample_count(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def feature_count(self) -> int:
        return int(self.inputs.shape[1])

    def take(self, rows: NDArray[np.int64], name: str | None = None) -> Dataset:
        return Dataset(
            inputs=self.inputs[rows],
            labels=self.labels[rows],
            name=name or self.name,
            seed=self.seed,
            num_classes=self.num_classes,
        )

    def split(self, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
        """Hold out ``fraction`` of the rows (seeded) as a validation set."""
        if not 0.0 <= fraction < 1.0:
            raise DomainError("validation fraction must lie in [0, 1)")
        held_out = int(math.floor(self.sample_count * fraction))
        if held_out == 0:
            return self, None
        order = np.random.default_rng(seed).permutation(self.sample_count)
        return (
            self.take(np.sort(order[held_out:])),
            self.take(np.sort(order[:held_out]), name=f"{self.name}-validation"),
        )


@dataclass(frozen=True)
class BatchSchedule:
    batch_size: int
    mode: BatchMode = BatchMode.SHUFFLED
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise DomainError("batch size must be at least 1")


def two_moons(m: int, noise: float, seed: int) -> Dataset:
    """
    Two interleaved unit half-circles with optional Gaussian noise.

    Class 0 is the upper arc centred at the origin, class 1 the lower arc centred at
    ``(1, 0.5)``. Rows are shuffled with the same seeded generator that draws the noise.
    """
    if m < 2 or m % 2:
        raise DomainError(f"two_moons needs an even sample count, got {m}")
    if noise < 0.0:
        raise DomainError("noise must be non-negative")
    half = m // 2
    angles = np.linspace(0.0, math.pi, half)
    outer = np.column_stack((np.cos(angles), np.sin(angles)))
    inner = np.column_stack((1.0 - np.cos(angles), 0.5 - np.sin(angles)))
    inputs = np.vstack((outer, inner))
    labels = np.concatenate((np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)))

    rng = np.random.default_rng(seed)
    if noise > 0.0:
        inputs = inputs + rng.normal(scale=noise, size=inputs.shape)
    order = rng.permutation(m)
    LOG.debug("Generated two-moons dataset with %d samples (noise=%.3f)", m, noise)
    return Dataset(
        inputs=inputs[order],
        labels=labels[order],
        name="two_moons",
        seed=seed,
        num_classes=2,
    )


def batches(ds: Dataset, sched: BatchSchedule, epoch: int) -> list[BatchRef]:
    """
    Split one epoch into batches; the last batch may be smaller.

    Shuffled order depends only on ``(sched.seed, epoch)``.
    """
    total = ds.sample_count
    if sched.mode is BatchMode.FULL:
        return [FULL]
    if sched.batch_size > total:
        raise DomainError(f"batch size {sched.batch_size} exceeds {total} samples")
    if sched.mode is BatchMode.SHUFFLED:
        order = np.random.default_rng([sched.seed, epoch]).permutation(total)
    else:
        order = np.arange(total, dtype=np.int64)
    return [
        BatchRef(indices=order[start : start + sched.batch_size])
        for start in range(0, total, sched.batch_size)
    ]
