"""Non-overlapping parameter partitions and their transfer operators."""

from __future__ import annotations

import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from aptsbench.errors import DimensionError, DomainError
from aptsbench.models.network import LayerSlice
from aptsbench.numeric import ParamVector

LOG = logging.getLogger(__name__)

IndexSet = NDArray[np.int64]


class PartitionStrategy(StrEnum):
    EVEN_BLOCKS = "even-blocks"
    LAYER_BLOCKS = "layer-blocks"


@dataclass(frozen=True, eq=False)
class Partition:
    """
    Disjoint, exhaustive index sets ``C_d`` over ``{0, ..., n-1}``.

    Restriction selects a subset in ascending index order; prolongation scatters back with zero
    padding. Layer-block partitions also remember which network layers each subset covers.
    """

    subsets: tuple[IndexSet, ...]
    n: int
    layer_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        subsets = tuple(np.sort(np.asarray(subset, dtype=np.int64)) for subset in self.subsets)
        if not subsets:
            raise DomainError("a partition needs at least one subdomain")
        if any(subset.ndim != 1 or subset.size == 0 for subset in subsets):
            raise DomainError("every subdomain must be a nonempty index set")
        merged = np.concatenate(subsets)
        if merged.size != self.n or not np.array_equal(np.sort(merged), np.arange(self.n)):
            raise DomainError(f"subdomains must be disjoint and cover [0, {self.n})")
        if self.layer_groups is not None and len(self.layer_groups) != len(subsets):
            raise DimensionError("layer groups must match the number of subdomains")
        object.__setattr__(self, "subsets", subsets)

    @property
    def subdomain_count(self) -> int:
        return len(self.subsets)

    def size(self, d: int) -> int:
        return int(self._subset(d).size)

    def _subset(self, d: int) -> IndexSet:
        if not 0 <= d < len(self.subsets):
            raise IndexError(f"subdomain {d} outside [0, {len(self.subsets)})")
        return self.subsets[d]


def restrict(p: Partition, d: int, theta: ParamVector) -> ParamVector:
    subset = p._subset(d)
    if theta.shape != (p.n,):
        raise DimensionError(f"expected a vector of length {p.n}, got shape {theta.shape}")
    return theta[subset]


def prolong(p: Partition, d: int, v: ParamVector) -> ParamVector:
    subset = p._subset(d)
    if v.shape != (subset.size,):
        raise DimensionError(
            f"subdomain {d} has {subset.size} entries, got a vector of shape {v.shape}",
        )
    full = np.zeros(p.n, dtype=np.float64)
    full[subset] = v
    return full


def make_partition(
    n: int,
    strategy: PartitionStrategy | str,
    subdomain_count: int,
    slices: Sequence[LayerSlice] | None = None,
) -> Partition:
    """
    Build a partition with ``subdomain_count`` subdomains.

    ``even-blocks`` splits ``[0, n)`` into contiguous ranges whose sizes differ by at most one,
    remainder going to the leading blocks. ``layer-blocks`` groups whole, consecutive layers and
    picks the split that minimises the largest block's parameter count.
    """
    strategy = PartitionStrategy(strategy)
    if subdomain_count < 1:
        raise DomainError("subdomain_count must be at least 1")
    if subdomain_count > n:
        raise DomainError(f"cannot split {n} parameters into {subdomain_count} subdomains")

    if strategy is PartitionStrategy.EVEN_BLOCKS:
        blocks = np.array_split(np.arange(n, dtype=np.int64), subdomain_count)
        return Partition(subsets=tuple(blocks), n=n)

    if not slices:
        raise DomainError("layer-blocks partitions need the network's layer slices")
    if subdomain_count > len(slices):
        raise DomainError(
            f"cannot split {len(slices)} layers into {subdomain_count} subdomains",
        )
    if slices[-1].stop != n:
        raise DimensionError("layer slices do not cover the parameter vector")
    groups = _balanced_layer_groups([s.stop - s.start for s in slices], subdomain_count)
    subsets = tuple(
        np.arange(slices[group[0]].start, slices[group[-1]].stop, dtype=np.int64)
        for group in groups
    )
    LOG.debug("Layer blocks %s with sizes %s", groups, [subset.size for subset in subsets])
    return Partition(subsets=subsets, n=n, layer_groups=groups)


def _balanced_layer_groups(
    layer_sizes: Sequence[int],
    group_count: int,
) -> tuple[tuple[int, ...], ...]:
    """Exhaustive search over contiguous splits; networks here have only a handful of layers."""
    layers = len(layer_sizes)
    best: tuple[int, int] | None = None
    best_cuts: tuple[int, ...] = ()
    for cuts in itertools.combinations(range(1, layers), group_count - 1):
        bounds = (0, *cuts, layers)
        loads = [sum(layer_sizes[a:b]) for a, b in itertools.pairwise(bounds)]
        score = (max(loads), max(loads) - min(loads))
        if best is None or score < best:
            best = score
            best_cuts = cuts
    bounds = (0, *best_cuts, layers)
    return tuple(tuple(range(a, b)) for a, b in itertools.pairwise(bounds))
