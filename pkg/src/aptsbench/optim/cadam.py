"""Adam with its step clipped to a trust radius."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from aptsbench.errors import DimensionError, DomainError
from aptsbench.numeric import Norm, ParamVector, norm, require_finite

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass(frozen=True, eq=False)
class CAdamState:
    m1: ParamVector
    m2: ParamVector
    t: int = 0
    lr: float = 0.001
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON

    @property
    def dim(self) -> int:
        return int(self.m1.shape[0])


def init_cadam(
    dim: int,
    lr: float,
    *,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPSILON,
) -> CAdamState:
    if dim < 1:
        raise DomainError("Adam state needs at least one parameter")
    if lr <= 0.0:
        raise DomainError("learning rate must be positive")
    return CAdamState(
        m1=np.zeros(dim, dtype=np.float64),
        m2=np.zeros(dim, dtype=np.float64),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: CAdamState, grad: ParamVector) -> tuple[ParamVector, CAdamState]:
    """Bias-corrected Adam update returned as an additive step ``theta + step``."""
    if grad.shape != state.m1.shape:
        raise DimensionError(f"expected a gradient of length {state.dim}, got {grad.shape}")
    require_finite(grad, "gradient")
    t = state.t + 1
    m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
    m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * (grad * grad)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    denom = np.sqrt(m2 * (1.0 / bc2)) + state.eps
    step = -(state.lr / bc1) * m1 / denom
    return step, replace(state, m1=m1, m2=m2, t=t)


def cadam_step(
    state: CAdamState,
    grad: ParamVector,
    delta: float,
    norm_kind: Norm = Norm.LINF,
) -> tuple[ParamVector, CAdamState]:
    """
    Adam step scaled back onto the ``delta`` ball when it leaves it.

    The scaling uses the same norm as the feasibility test. Moments follow plain Adam whether or
    not the step was clipped.
    """
    if delta <= 0.0:
        raise DomainError("clip radius must be positive")
    step, updated = adam_step(state, grad)
    length = norm(step, norm_kind)
    if length > delta:
        step = step * (delta / length)
    return step, updated
