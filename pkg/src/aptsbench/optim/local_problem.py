"""First-order consistent restricted objectives for one subdomain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aptsbench.errors import DimensionError
from aptsbench.models.objectives import FULL, BatchRef, Objective
from aptsbench.numeric import ParamVector, as_param_vector, require_finite
from aptsbench.optim.decomposition import Partition, restrict


@dataclass(frozen=True, eq=False)
class LocalObjective:
    """
    The global objective seen through subdomain ``d``.

    Coordinates outside ``C_d`` stay frozen at the anchor. ``correction`` is fixed once per outer
    iteration so that the gradient at ``anchor_restricted`` equals the restricted global gradient
    taken on the anchor batch, even when local evaluations use another batch.
    """

    base: Objective
    partition: Partition
    d: int
    anchor: ParamVector
    anchor_restricted: ParamVector
    correction: ParamVector
    anchor_value: float

    @property
    def dim(self) -> int:
        return int(self.anchor_restricted.shape[0])

    def evaluate(self, theta: ParamVector, batch: BatchRef = FULL) -> tuple[float, ParamVector]:
        return consistent_eval(self, theta, batch)


def build_local_objective(
    base: Objective,
    partition: Partition,
    d: int,
    anchor: ParamVector,
    batch: BatchRef = FULL,
    *,
    anchor_batch: BatchRef | None = None,
    anchor_grad: ParamVector | None = None,
) -> LocalObjective:
    """
    Snapshot ``anchor`` and precompute the correction for subdomain ``d``.

    ``anchor_grad`` lets callers reuse a gradient already computed on ``anchor_batch``; it is only
    trusted when supplied together with the batch it came from.
    """
    if anchor.shape != (partition.n,):
        raise DimensionError(f"anchor must have length {partition.n}, got shape {anchor.shape}")
    frozen = as_param_vector(anchor, name="anchor")
    reference_batch = batch if anchor_batch is None else anchor_batch
    if anchor_grad is None:
        _, anchor_grad = base.evaluate(frozen, reference_batch)
    require_finite(anchor_grad, "anchor gradient")

    anchor_restricted = restrict(partition, d, frozen).copy()
    uncorrected = LocalObjective(
        base=base,
        partition=partition,
        d=d,
        anchor=frozen,
        anchor_restricted=anchor_restricted,
        correction=np.zeros_like(anchor_restricted),
        anchor_value=0.0,
    )
    value, local_grad = restricted_eval(uncorrected, anchor_restricted, batch)
    correction = restrict(partition, d, anchor_grad) - local_grad
    return LocalObjective(
        base=base,
        partition=partition,
        d=d,
        anchor=frozen,
        anchor_restricted=anchor_restricted,
        correction=correction,
        anchor_value=value,
    )


def restricted_eval(
    lo: LocalObjective,
    theta_d: ParamVector,
    batch: BatchRef = FULL,
) -> tuple[float, ParamVector]:
    """Evaluate ``f`` with subdomain coordinates set to ``theta_d`` and the rest frozen."""
    if theta_d.shape != lo.anchor_restricted.shape:
        raise DimensionError(
            f"subdomain {lo.d} has {lo.dim} entries, got a vector of shape {theta_d.shape}",
        )
    full = lo.anchor.copy()
    full[lo.partition.subsets[lo.d]] = theta_d
    value, grad = lo.base.evaluate(full, batch)
    return value, restrict(lo.partition, lo.d, grad)


def consistent_eval(
    lo: LocalObjective,
    theta_d: ParamVector,
    batch: BatchRef = FULL,
) -> tuple[float, ParamVector]:
    value, grad = restricted_eval(lo, theta_d, batch)
    shift = theta_d - lo.anchor_restricted
    return value + float(np.dot(lo.correction, shift)), grad + lo.correction
