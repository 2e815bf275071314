"""Heavy-ball SGD used as a comparison baseline next to plain Adam."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from aptsbench.errors import DimensionError, DomainError
from aptsbench.numeric import ParamVector, require_finite


@dataclass(frozen=True, eq=False)
class MomentumState:
    velocity: ParamVector
    lr: float
    momentum: float = 0.9


def init_momentum(dim: int, lr: float, momentum: float = 0.9) -> MomentumState:
    if lr <= 0.0:
        raise DomainError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise DomainError("momentum must lie in [0, 1)")
    return MomentumState(velocity=np.zeros(dim, dtype=np.float64), lr=lr, momentum=momentum)


def sgd_momentum_step(state: MomentumState, grad: ParamVector) -> tuple[ParamVector, MomentumState]:
    """Heavy-ball update ``v <- mu v - lr g`` returned as the additive step ``v``."""
    if grad.shape != state.velocity.shape:
        raise DimensionError(
            f"expected a gradient of length {state.velocity.shape[0]}, got {grad.shape}",
        )
    require_finite(grad, "gradient")
    velocity = state.momentum * state.velocity - state.lr * grad
    return velocity, replace(state, velocity=velocity)
