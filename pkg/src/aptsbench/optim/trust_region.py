"""Classical trust-region loop with identity or limited-memory BFGS curvature."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from aptsbench.config import HessianProxy, TrParams
from aptsbench.errors import DomainError, NonFiniteError
from aptsbench.models.objectives import FULL, BatchRef, Objective
from aptsbench.numeric import Norm, ParamVector, as_param_vector, norm, require_finite

LOG = logging.getLogger(__name__)

RHO_DENOMINATOR_FLOOR = 1e-16
CURVATURE_SKIP = 1e-10


class HessianOperator(Protocol):
    """Symmetric curvature proxy ``B`` applied as a matrix-vector product."""

    def apply(self, v: ParamVector) -> ParamVector: ...

    def with_pair(self, s: ParamVector, y: ParamVector) -> HessianOperator: ...


@dataclass(frozen=True)
class IdentityHessian:
    def apply(self, v: ParamVector) -> ParamVector:
        return v.copy()

    def with_pair(self, s: ParamVector, y: ParamVector) -> IdentityHessian:
        del s, y
        return self


@dataclass(frozen=True, eq=False)
class LbfgsHessian:
    """
    Direct (not inverse) BFGS matrix built from the newest ``memory`` curvature pairs.

    ``B0 = gamma * I`` with ``gamma = y'y / s'y`` from the newest pair. Pairs whose curvature
    ``s'y`` is not safely positive are skipped, which keeps ``B`` symmetric positive definite.
    """

    memory: int = 10
    s_pairs: tuple[ParamVector, ...] = ()
    y_pairs: tuple[ParamVector, ...] = ()
    gamma: float = field(init=False, default=1.0)
    b_pairs: tuple[ParamVector, ...] = field(init=False, default=())

    def __post_init__(self) -> None:
        if self.memory < 1:
            raise DomainError("L-BFGS memory must be at least 1")
        if self.s_pairs:
            s, y = self.s_pairs[-1], self.y_pairs[-1]
            object.__setattr__(self, "gamma", float(np.dot(y, y) / np.dot(s, y)))
        b_pairs: list[ParamVector] = []
        for s in self.s_pairs:
            b_pairs.append(self._apply_prefix(s, b_pairs))
        object.__setattr__(self, "b_pairs", tuple(b_pairs))

    def apply(self, v: ParamVector) -> ParamVector:
        return self._apply_prefix(v, self.b_pairs)

    def with_pair(self, s: ParamVector, y: ParamVector) -> LbfgsHessian:
        curvature = float(np.dot(s, y))
        if curvature <= CURVATURE_SKIP * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            LOG.debug("Skipping curvature pair with s'y=%.3e", curvature)
            return self
        keep = self.memory - 1
        s_pairs = (*self.s_pairs[len(self.s_pairs) - keep :], s.copy()) if keep else (s.copy(),)
        y_pairs = (*self.y_pairs[len(self.y_pairs) - keep :], y.copy()) if keep else (y.copy(),)
        return LbfgsHessian(memory=self.memory, s_pairs=s_pairs, y_pairs=y_pairs)

    @property
    def pair_count(self) -> int:
        return len(self.s_pairs)

    def _apply_prefix(
        self,
        v: ParamVector,
        b_pairs: list[ParamVector] | tuple[ParamVector, ...],
    ) -> ParamVector:
        out = self.gamma * v
        for s, y, b in zip(self.s_pairs, self.y_pairs, b_pairs, strict=False):
            out = out - (float(np.dot(b, v)) / float(np.dot(s, b))) * b
            out = out + (float(np.dot(y, v)) / float(np.dot(y, s))) * y
        return out


def make_hessian(params: TrParams) -> IdentityHessian | LbfgsHessian:
    if params.hessian is HessianProxy.LBFGS:
        return LbfgsHessian(memory=params.lbfgs_memory)
    return IdentityHessian()


@dataclass(frozen=True, eq=False)
class TrModel:
    """Quadratic model ``m(s) = <g, s> + 1/2 <s, B s>`` around the current iterate."""

    grad: ParamVector
    hessian: IdentityHessian | LbfgsHessian = field(default_factory=IdentityHessian)

    def value(self, s: ParamVector) -> float:
        return float(np.dot(self.grad, s)) + 0.5 * float(np.dot(s, self.hessian.apply(s)))

    def decrease(self, s: ParamVector) -> float:
        return -self.value(s)


@dataclass(frozen=True)
class TrRecord:
    iteration: int
    rho: float
    accepted: bool
    delta_before: float
    delta_after: float
    f_before: float
    f_after: float
    predicted_decrease: float


@dataclass(frozen=True, eq=False)
class TrState:
    theta: ParamVector
    delta: float
    f_value: float
    grad: ParamVector
    hessian: IdentityHessian | LbfgsHessian
    batch: BatchRef = FULL
    history: tuple[TrRecord, ...] = ()

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def accepted_count(self) -> int:
        return sum(record.accepted for record in self.history)


def solve_subproblem(model: TrModel, delta: float, norm_kind: Norm = Norm.L2) -> ParamVector:
    """
    Approximately minimise the model over ``||s|| <= delta``.

    The identity proxy is solved exactly in both norms. The L-BFGS proxy uses truncated
    conjugate gradients in the 2-norm ball; in the max-norm ball the CG step on the inscribed
    2-norm ball competes with the max-norm Cauchy point and the lower model value wins.
    """
    if delta <= 0.0:
        raise DomainError("trust radius must be positive")
    g = model.grad
    if not np.any(g):
        return np.zeros_like(g)

    if isinstance(model.hessian, IdentityHessian):
        if norm_kind is Norm.LINF:
            return np.clip(-g, -delta, delta)
        return -min(delta / norm(g), 1.0) * g

    cg_step = _steihaug(model, delta)
    if norm_kind is Norm.L2:
        return cg_step
    cauchy = _linf_cauchy(model, delta)
    return cauchy if model.value(cauchy) < model.value(cg_step) else cg_step


def rho(f_old: float, f_new: float, model_decrease: float) -> float:
    """Actual over predicted decrease; a non-positive prediction forces rejection."""
    if model_decrease <= 0.0:
        return -math.inf
    return (f_old - f_new) / max(model_decrease, RHO_DENOMINATOR_FLOOR)


def update_radius(ratio: float, delta: float, params: TrParams) -> tuple[bool, float]:
    """Return ``(accepted, new_delta)``; ``ratio == eta1`` counts as a rejection."""
    if ratio >= params.eta2:
        return True, params.clamp(params.gamma_inc * delta)
    if ratio > params.eta1:
        return True, params.clamp(delta)
    return False, params.clamp(params.gamma_dec * delta)


def init_tr_state(
    obj: Objective,
    theta0: ParamVector,
    delta0: float,
    params: TrParams,
    batch: BatchRef = FULL,
    *,
    evaluated: tuple[float, ParamVector] | None = None,
) -> TrState:
    if delta0 <= 0.0:
        raise DomainError("initial trust radius must be positive")
    theta = as_param_vector(theta0, name="theta0")
    f_value, grad = obj.evaluate(theta, batch) if evaluated is None else evaluated
    require_finite(f_value, "initial objective value")
    require_finite(grad, "initial gradient")
    return TrState(
        theta=theta,
        delta=params.clamp(delta0),
        f_value=float(f_value),
        grad=np.asarray(grad, dtype=np.float64),
        hessian=make_hessian(params),
        batch=batch,
    )


def tr_step(
    obj: Objective,
    state: TrState,
    params: TrParams,
    batch: BatchRef | None = None,
) -> TrState:
    """
    One trust-region iteration.

    A different ``batch`` re-anchors the value and gradient at the current iterate before the
    step. An infinite trial value is a rejection; NaN or a non-finite trial gradient raises.
    """
    if batch is not None and batch is not state.batch:
        f_value, grad = obj.evaluate(state.theta, batch)
        require_finite(f_value, "objective value")
        require_finite(grad, "gradient")
        state = replace(state, f_value=float(f_value), grad=grad, batch=batch)

    model = TrModel(grad=state.grad, hessian=state.hessian)
    step = solve_subproblem(model, state.delta, params.norm)
    predicted = model.decrease(step)

    f_new = state.f_value
    g_new = state.grad
    if not np.any(step):
        ratio = -math.inf
    else:
        f_new, g_new = obj.evaluate(state.theta + step, state.batch)
        if f_new == math.inf:
            ratio = -math.inf
        else:
            if not math.isfinite(f_new):
                raise NonFiniteError(f"objective returned {f_new} at the trial point")
            require_finite(g_new, "trial gradient")
            ratio = rho(state.f_value, f_new, predicted)

    accepted, delta = update_radius(ratio, state.delta, params)
    record = TrRecord(
        iteration=state.iterations,
        rho=ratio,
        accepted=accepted,
        delta_before=state.delta,
        delta_after=delta,
        f_before=state.f_value,
        f_after=float(f_new) if accepted else state.f_value,
        predicted_decrease=predicted,
    )
    LOG.debug(
        "TR iteration %d: rho=%.4g accepted=%s delta %.3e -> %.3e",
        record.iteration,
        ratio,
        accepted,
        state.delta,
        delta,
    )
    if not accepted:
        return replace(state, delta=delta, history=(*state.history, record))
    return replace(
        state,
        theta=state.theta + step,
        delta=delta,
        f_value=float(f_new),
        grad=g_new,
        hessian=state.hessian.with_pair(step, g_new - state.grad),
        history=(*state.history, record),
    )


def tr_continue(obj: Objective, state: TrState, params: TrParams, iterations: int) -> TrState:
    if iterations < 0:
        raise DomainError("iteration count cannot be negative")
    for _ in range(iterations):
        state = tr_step(obj, state, params)
    return state


def tr_run(
    obj: Objective,
    theta0: ParamVector,
    delta0: float,
    params: TrParams,
    iterations: int,
    batch: BatchRef = FULL,
) -> TrState:
    """Run ``iterations`` trust-region steps on one fixed batch and keep the full history."""
    state = init_tr_state(obj, theta0, delta0, params, batch)
    return tr_continue(obj, state, params, iterations)


def _steihaug(model: TrModel, delta: float) -> ParamVector:
    g = model.grad
    g_norm = float(np.linalg.norm(g))
    tolerance = min(0.1, math.sqrt(g_norm)) * g_norm
    z = np.zeros_like(g)
    r = -g
    d = r.copy()
    for _ in range(2 * g.shape[0]):
        bd = model.hessian.apply(d)
        curvature = float(np.dot(d, bd))
        if curvature <= 0.0:
            return z + _boundary_tau(z, d, delta) * d
        alpha = float(np.dot(r, r)) / curvature
        z_next = z + alpha * d
        if float(np.linalg.norm(z_next)) >= delta:
            return z + _boundary_tau(z, d, delta) * d
        r_next = r - alpha * bd
        if float(np.linalg.norm(r_next)) < tolerance:
            return z_next
        beta = float(np.dot(r_next, r_next)) / float(np.dot(r, r))
        d = r_next + beta * d
        z = z_next
        r = r_next
    return z


def _boundary_tau(z: ParamVector, d: ParamVector, delta: float) -> float:
    """Positive root of ``||z + tau d|| = delta``."""
    a = float(np.dot(d, d))
    b = 2.0 * float(np.dot(z, d))
    c = float(np.dot(z, z)) - delta**2
    return (-b + math.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)


def _linf_cauchy(model: TrModel, delta: float) -> ParamVector:
    g = model.grad
    limit = delta / norm(g, Norm.LINF)
    curvature = float(np.dot(g, model.hessian.apply(g)))
    t = limit if curvature <= 0.0 else min(float(np.dot(g, g)) / curvature, limit)
    return -t * g
