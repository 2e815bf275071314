"""Inexact APTS: layer-block subdomains trained from one cached global pass per iteration."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed

from aptsbench.config import IaptsConfig, MomentPolicy
from aptsbench.errors import DomainError, StateError
from aptsbench.models.network import LayerCache, layer_slices, local_grad_from_cache
from aptsbench.models.objectives import FULL, BatchRef, NetworkObjective
from aptsbench.numeric import ParamVector, as_param_vector, require_finite
from aptsbench.optim.apts import (
    AptsIterationRecord,
    AptsState,
    LocalResult,
    SubdomainError,
    accept_step,
    assemble_step,
    global_sweep,
)
from aptsbench.optim.cadam import CAdamState, cadam_step, init_cadam
from aptsbench.optim.decomposition import Partition, PartitionStrategy, make_partition

LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubdomainBlock:
    """Consecutive layers owned by one worker and their contiguous parameter range."""

    d: int
    layers: tuple[int, ...]
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


def layer_partition(net: NetworkObjective, subdomain_count: int) -> Partition:
    return make_partition(
        net.dim,
        PartitionStrategy.LAYER_BLOCKS,
        subdomain_count,
        layer_slices(net.spec),
    )


def make_blocks(net: NetworkObjective, partition: Partition) -> tuple[SubdomainBlock, ...]:
    if partition.layer_groups is None:
        raise DomainError("inexact APTS needs a layer-blocks partition")
    slices = layer_slices(net.spec)
    return tuple(
        SubdomainBlock(
            d=d,
            layers=group,
            start=slices[group[0]].start,
            stop=slices[group[-1]].stop,
        )
        for d, group in enumerate(partition.layer_groups)
    )


def global_pass_and_cache(
    net: NetworkObjective,
    theta_k: ParamVector,
    batch: BatchRef = FULL,
) -> tuple[float, ParamVector, LayerCache]:
    """Exact loss and gradient at ``theta_k`` plus a read-only copy of every layer boundary."""
    loss, grad, cache = net.evaluate_with_cache(theta_k, batch)
    if cache.downstream is None:
        raise StateError("backward pass did not populate the downstream gradients")
    frozen = LayerCache(
        theta=_read_only(cache.theta),
        inputs=tuple(_read_only(a) for a in cache.inputs),
        pre_activations=tuple(_read_only(z) for z in cache.pre_activations),
        predictions=_read_only(cache.predictions),
        downstream=tuple(_read_only(g) for g in cache.downstream),
    )
    return loss, grad, frozen


def _read_only(array: np.ndarray) -> np.ndarray:
    copy = np.array(array, dtype=np.float64, copy=True)
    copy.flags.writeable = False
    return copy


def iapts_local_phase(
    net: NetworkObjective,
    blocks: Sequence[SubdomainBlock],
    cache: LayerCache,
    delta_g: float,
    cfg: IaptsConfig,
    *,
    exact_grad: ParamVector | None = None,
    moments: Sequence[CAdamState | None] | None = None,
) -> list[LocalResult]:
    """
    Run ``cfg.local_iters`` CAdam steps per block against the frozen cache.

    Every local step is kept. Each result's ``decrease`` is the first-order decrease
    ``-<g_d, s_d>`` under the exact block gradient, so the decreases sum to ``-<g, s>``.
    """
    if delta_g <= 0.0:
        raise DomainError("global trust radius must be positive")
    if not cache.populated:
        raise StateError("local phase needs a cache from global_pass_and_cache")
    carried = list(moments) if moments is not None else [None] * len(blocks)
    workers = cfg.n_jobs if cfg.n_jobs is not None else len(blocks)
    results: list[LocalResult] = Parallel(n_jobs=workers, backend="threading")(
        delayed(_train_block)(net, block, cache, delta_g, cfg, exact_grad, carried[block.d])
        for block in blocks
    )
    return results


def _train_block(
    net: NetworkObjective,
    block: SubdomainBlock,
    cache: LayerCache,
    delta_g: float,
    cfg: IaptsConfig,
    exact_grad: ParamVector | None,
    moments: CAdamState | None,
) -> LocalResult:
    radius = delta_g / cfg.local_iters
    start = cache.theta[block.start : block.stop].copy()
    theta_b = start.copy()
    state = init_cadam(block.size, radius) if moments is None else replace(moments, lr=radius)
    first_grad: ParamVector | None = None
    try:
        for _ in range(cfg.local_iters):
            grad = local_grad_from_cache(net.spec, theta_b, cache, block.layers)
            require_finite(grad, f"reconstructed gradient of block {block.d}")
            if first_grad is None:
                first_grad = grad
            step, state = cadam_step(state, grad, radius, cfg.tr.norm)
            theta_b = theta_b + step
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        raise SubdomainError(block.d, str(exc)) from exc

    s_d = theta_b - start
    reference = exact_grad[block.start : block.stop] if exact_grad is not None else first_grad
    decrease = -float(np.dot(reference, s_d)) if reference is not None else 0.0
    kept = state if cfg.moment_policy is MomentPolicy.PERSIST else None
    return LocalResult(d=block.d, step=s_d, decrease=decrease, moments=kept)


def iapts_iteration(
    net: NetworkObjective,
    state: AptsState,
    cfg: IaptsConfig,
    partition: Partition,
    batch: BatchRef = FULL,
    *,
    blocks: Sequence[SubdomainBlock] | None = None,
) -> tuple[AptsState, AptsIterationRecord]:
    """One global pass, block-local CAdam, first-order acceptance, then the global sweep."""
    started = time.perf_counter()
    if blocks is None:
        blocks = make_blocks(net, partition)
    tr = cfg.global_tr
    loss, grad, cache = global_pass_and_cache(net, state.theta, batch)
    require_finite(loss, "training loss")
    require_finite(grad, "gradient")

    local = iapts_local_phase(
        net,
        blocks,
        cache,
        state.delta,
        cfg,
        exact_grad=grad,
        moments=state.moments,
    )
    s = assemble_step(partition, [result.step for result in local])
    predicted = -float(np.dot(grad, s))
    theta_half, outcome = accept_step(net, state.theta, loss, s, predicted, state.delta, tr, batch)
    theta_next, delta_sweep, f_next = global_sweep(
        net,
        theta_half,
        outcome.delta_after,
        outcome.f_after,
        tr,
        cfg.global_tr_iters,
        batch,
    )
    delta_next = tr.clamp(delta_sweep if cfg.feed_back_radius else outcome.delta_after)

    moments: tuple[CAdamState | None, ...] | None = None
    if cfg.moment_policy is MomentPolicy.PERSIST and outcome.accepted:
        moments = tuple(result.moments for result in local)

    record = AptsIterationRecord(
        k=state.k,
        rho_global=outcome.rho,
        accepted=outcome.accepted,
        delta_before=state.delta,
        delta_half=outcome.delta_after,
        delta_after=delta_next,
        local_decreases=tuple(result.decrease for result in local),
        f_before=loss,
        f_after=f_next,
        wall_time=time.perf_counter() - started,
    )
    LOG.debug(
        "IAPTS iteration %d: rho=%.4g accepted=%s loss %.6g -> %.6g delta %.3e -> %.3e",
        record.k,
        record.rho_global,
        record.accepted,
        loss,
        f_next,
        state.delta,
        delta_next,
    )
    next_state = AptsState(theta=theta_next, delta=delta_next, k=state.k + 1, moments=moments)
    return next_state, record


def iapts_run(
    net: NetworkObjective,
    theta0: ParamVector,
    cfg: IaptsConfig,
    iterations: int,
    *,
    batch_at: Callable[[int], BatchRef] | None = None,
) -> tuple[ParamVector, list[AptsIterationRecord]]:
    """Run ``iterations`` outer iterations starting from radius ``cfg.lr_init``."""
    if iterations < 0:
        raise DomainError("iteration count cannot be negative")
    partition = layer_partition(net, cfg.subdomain_count)
    blocks = make_blocks(net, partition)
    state = AptsState(theta=as_param_vector(theta0, name="theta0"), delta=cfg.lr_init)
    records: list[AptsIterationRecord] = []
    for k in range(iterations):
        batch = batch_at(k) if batch_at is not None else FULL
        state, record = iapts_iteration(net, state, cfg, partition, batch, blocks=blocks)
        records.append(record)
    return state.theta, records
