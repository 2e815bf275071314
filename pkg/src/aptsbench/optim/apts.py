"""Additively preconditioned trust-region outer loop with parallel subdomain solves."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed

from aptsbench.config import AptsConfig, LocalSolver, MomentPolicy, TrParams
from aptsbench.errors import DimensionError, DomainError, NonFiniteError
from aptsbench.models.objectives import FULL, BatchRef, Objective
from aptsbench.numeric import ParamVector, as_param_vector, require_finite
from aptsbench.optim.cadam import CAdamState, cadam_step, init_cadam
from aptsbench.optim.decomposition import Partition, make_partition, prolong, restrict
from aptsbench.optim.local_problem import LocalObjective, build_local_objective
from aptsbench.optim.trust_region import init_tr_state, rho, tr_continue, update_radius

LOG = logging.getLogger(__name__)


class SubdomainError(RuntimeError):
    """Raised when the solve on one subdomain fails; the outer iteration is abandoned."""

    def __init__(self, subdomain: int, reason: str) -> None:
        super().__init__(f"subdomain {subdomain} failed: {reason}")
        self.subdomain = subdomain


@dataclass(frozen=True, eq=False)
class LocalResult:
    d: int
    step: ParamVector
    decrease: float
    moments: CAdamState | None = None


@dataclass(frozen=True)
class Acceptance:
    rho: float
    accepted: bool
    delta_before: float
    delta_after: float
    f_before: float
    f_after: float


@dataclass(frozen=True)
class AptsIterationRecord:
    k: int
    rho_global: float
    accepted: bool
    delta_before: float
    delta_half: float
    delta_after: float
    local_decreases: tuple[float, ...]
    f_before: float
    f_after: float
    wall_time: float


@dataclass(frozen=True, eq=False)
class AptsState:
    """Outer-iteration state; local Adam moments are kept only under the persist policy."""

    theta: ParamVector
    delta: float
    k: int = 0
    moments: tuple[CAdamState | None, ...] | None = None


def local_tr_params(tr: TrParams, delta_g: float, m: int) -> TrParams:
    """Start at ``delta_g / m`` and never grow, so ``m`` local steps stay inside ``delta_g``."""
    local_delta = delta_g / m
    return tr.model_copy(update={"gamma_inc": 1.0, "delta_min": min(tr.delta_min, local_delta)})


def local_phase(
    obj: Objective,
    partition: Partition,
    theta_k: ParamVector,
    delta_g: float,
    m: int,
    cfg: AptsConfig,
    batch: BatchRef = FULL,
    *,
    anchor_grad: ParamVector | None = None,
    moments: Sequence[CAdamState | None] | None = None,
) -> list[LocalResult]:
    """
    Solve every subdomain problem on its own worker thread.

    Results come back in ascending subdomain order regardless of which worker finishes first.
    """
    if delta_g <= 0.0:
        raise DomainError("global trust radius must be positive")
    if m < 1:
        raise DomainError("local iteration count must be at least 1")
    if anchor_grad is None:
        _, anchor_grad = obj.evaluate(theta_k, batch)
    count = partition.subdomain_count
    carried = list(moments) if moments is not None else [None] * count
    workers = cfg.n_jobs if cfg.n_jobs is not None else count
    results: list[LocalResult] = Parallel(n_jobs=workers, backend="threading")(
        delayed(_solve_subdomain)(
            obj,
            partition,
            d,
            theta_k,
            anchor_grad,
            delta_g,
            m,
            cfg,
            batch,
            carried[d],
        )
        for d in range(count)
    )
    return results


def _solve_subdomain(
    obj: Objective,
    partition: Partition,
    d: int,
    theta_k: ParamVector,
    anchor_grad: ParamVector,
    delta_g: float,
    m: int,
    cfg: AptsConfig,
    batch: BatchRef,
    moments: CAdamState | None,
) -> LocalResult:
    try:
        local = build_local_objective(obj, partition, d, theta_k, batch, anchor_grad=anchor_grad)
        if cfg.local_solver is LocalSolver.CADAM:
            return _cadam_subdomain(local, d, delta_g, m, cfg, batch, moments)
        params = local_tr_params(cfg.tr, delta_g, m)
        state = init_tr_state(
            local,
            local.anchor_restricted,
            delta_g / m,
            params,
            batch,
            evaluated=(local.anchor_value, restrict(partition, d, anchor_grad)),
        )
        state = tr_continue(local, state, params, m)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        raise SubdomainError(d, str(exc)) from exc
    step = state.theta - local.anchor_restricted
    LOG.debug(
        "Subdomain %d: %d/%d local steps accepted, decrease %.4g",
        d,
        state.accepted_count,
        m,
        local.anchor_value - state.f_value,
    )
    return LocalResult(d=d, step=step, decrease=local.anchor_value - state.f_value)


def _cadam_subdomain(
    local: LocalObjective,
    d: int,
    delta_g: float,
    m: int,
    cfg: AptsConfig,
    batch: BatchRef,
    moments: CAdamState | None,
) -> LocalResult:
    radius = delta_g / m
    state = init_cadam(local.dim, radius) if moments is None else replace(moments, lr=radius)
    theta_d = local.anchor_restricted.copy()
    for _ in range(m):
        _, grad = local.evaluate(theta_d, batch)
        step, state = cadam_step(state, grad, radius, cfg.tr.norm)
        theta_d = theta_d + step
    value, _ = local.evaluate(theta_d, batch)
    require_finite(value, f"subdomain {d} objective")
    kept = state if cfg.moment_policy is MomentPolicy.PERSIST else None
    return LocalResult(
        d=d,
        step=theta_d - local.anchor_restricted,
        decrease=local.anchor_value - value,
        moments=kept,
    )


def assemble_step(partition: Partition, steps: Sequence[ParamVector]) -> ParamVector:
    """Sum the prolonged local steps in ascending subdomain order."""
    if len(steps) != partition.subdomain_count:
        raise DimensionError(
            f"expected {partition.subdomain_count} local steps, got {len(steps)}",
        )
    total = np.zeros(partition.n, dtype=np.float64)
    for d, step in enumerate(steps):
        total += prolong(partition, d, step)
    return total


def accept_step(
    obj: Objective,
    theta_k: ParamVector,
    f_k: float,
    s: ParamVector,
    predicted: float,
    delta_g: float,
    tr: TrParams,
    batch: BatchRef = FULL,
) -> tuple[ParamVector, Acceptance]:
    """Trust-region acceptance of a precomputed step against a given predicted decrease."""
    if not np.any(s):
        ratio = -math.inf
        f_new = f_k
    else:
        f_new, g_new = obj.evaluate(theta_k + s, batch)
        if f_new == math.inf:
            ratio = -math.inf
        else:
            if not math.isfinite(f_new):
                raise NonFiniteError(f"objective returned {f_new} at the assembled step")
            require_finite(g_new, "gradient at the assembled step")
            ratio = rho(f_k, f_new, predicted)
    accepted, delta = update_radius(ratio, delta_g, tr)
    outcome = Acceptance(
        rho=ratio,
        accepted=accepted,
        delta_before=delta_g,
        delta_after=delta,
        f_before=f_k,
        f_after=float(f_new) if accepted else f_k,
    )
    if not accepted:
        return theta_k, outcome
    return theta_k + s, outcome


def global_acceptance(
    obj: Objective,
    theta_k: ParamVector,
    s: ParamVector,
    local_decreases: Sequence[float],
    delta_g: float,
    tr: TrParams,
    batch: BatchRef = FULL,
    *,
    f_k: float | None = None,
) -> tuple[ParamVector, float, Acceptance]:
    """Accept or reject ``s`` with the summed local decreases as the predicted decrease."""
    if f_k is None:
        f_k, _ = obj.evaluate(theta_k, batch)
    theta_half, outcome = accept_step(
        obj,
        theta_k,
        f_k,
        s,
        sum(local_decreases),
        delta_g,
        tr,
        batch,
    )
    return theta_half, outcome.delta_after, outcome


def global_sweep(
    obj: Objective,
    theta: ParamVector,
    delta: float,
    f_value: float,
    tr: TrParams,
    iterations: int,
    batch: BatchRef = FULL,
) -> tuple[ParamVector, float, float]:
    """Plain trust-region iterations on the global objective; returns (theta, delta, f)."""
    if iterations == 0:
        return theta, delta, f_value
    state = init_tr_state(obj, theta, delta, tr, batch)
    state = tr_continue(obj, state, tr, iterations)
    return state.theta, state.delta, state.f_value


def apts_iteration(
    obj: Objective,
    state: AptsState,
    cfg: AptsConfig,
    partition: Partition,
    batch: BatchRef = FULL,
) -> tuple[AptsState, AptsIterationRecord]:
    """One outer iteration on a single batch shared by every phase."""
    started = time.perf_counter()
    f_k, g_k = obj.evaluate(state.theta, batch)
    require_finite(f_k, "objective value")
    require_finite(g_k, "gradient")

    local = local_phase(
        obj,
        partition,
        state.theta,
        state.delta,
        cfg.inner_iters,
        cfg,
        batch,
        anchor_grad=g_k,
        moments=state.moments,
    )
    s = assemble_step(partition, [result.step for result in local])
    decreases = tuple(result.decrease for result in local)
    theta_half, delta_half, outcome = global_acceptance(
        obj,
        state.theta,
        s,
        decreases,
        state.delta,
        cfg.tr,
        batch,
        f_k=f_k,
    )
    theta_next, delta_sweep, f_next = global_sweep(
        obj,
        theta_half,
        delta_half,
        outcome.f_after,
        cfg.tr,
        cfg.global_tr_iters,
        batch,
    )
    delta_next = delta_sweep if cfg.feed_back_radius else delta_half

    moments: tuple[CAdamState | None, ...] | None = None
    if cfg.moment_policy is MomentPolicy.PERSIST and outcome.accepted:
        moments = tuple(result.moments for result in local)

    record = AptsIterationRecord(
        k=state.k,
        rho_global=outcome.rho,
        accepted=outcome.accepted,
        delta_before=state.delta,
        delta_half=delta_half,
        delta_after=delta_next,
        local_decreases=decreases,
        f_before=f_k,
        f_after=f_next,
        wall_time=time.perf_counter() - started,
    )
    LOG.debug(
        "APTS iteration %d: rho=%.4g accepted=%s f %.6g -> %.6g delta %.3e -> %.3e",
        record.k,
        record.rho_global,
        record.accepted,
        f_k,
        f_next,
        state.delta,
        delta_next,
    )
    next_state = AptsState(theta=theta_next, delta=delta_next, k=state.k + 1, moments=moments)
    return next_state, record


def apts_run(
    obj: Objective,
    theta0: ParamVector,
    cfg: AptsConfig,
    iterations: int,
    *,
    delta0: float,
    partition: Partition | None = None,
    batch_at: Callable[[int], BatchRef] | None = None,
) -> tuple[ParamVector, list[AptsIterationRecord]]:
    """
    Run ``iterations`` outer iterations; ``batch_at(k)`` picks the batch for iteration ``k``.

    Without an explicit partition an even-blocks split into ``cfg.subdomain_count`` is used.
    """
    if iterations < 0:
        raise DomainError("iteration count cannot be negative")
    theta = as_param_vector(theta0, name="theta0")
    if partition is None:
        partition = make_partition(theta.shape[0], cfg.partition_strategy, cfg.subdomain_count)
    state = AptsState(theta=theta, delta=cfg.tr.clamp(delta0))
    records: list[AptsIterationRecord] = []
    for k in range(iterations):
        batch = batch_at(k) if batch_at is not None else FULL
        state, record = apts_iteration(obj, state, cfg, partition, batch)
        records.append(record)
    return state.theta, records

