"""Dense parameter-vector arithmetic shared by every optimizer."""

from __future__ import annotations

from enum import StrEnum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from aptsbench.errors import DimensionError, NonFiniteError

ParamVector = NDArray[np.float64]


class Norm(StrEnum):
    """Vector norm used for trust-region balls and step clipping."""

    L2 = "l2"
    LINF = "linf"


def as_param_vector(values: ArrayLike, *, name: str = "vector") -> ParamVector:
    """
    Return a fresh contiguous float64 copy of ``values``.

    The result is always one-dimensional and finite; anything else is rejected so that a corrupt
    iterate is caught at the boundary instead of deep inside an optimizer.
    """
    array = np.array(values, dtype=np.float64, copy=True)
    if array.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} contains NaN or infinite entries")
    return array


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``alpha * x + y`` without modifying either input."""
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    return alpha * x + y


def norm(v: ParamVector, kind: Norm = Norm.L2) -> float:
    if v.size == 0:
        raise DimensionError("norm of an empty vector is undefined")
    if kind is Norm.LINF:
        return float(np.max(np.abs(v)))
    return float(np.linalg.norm(v))


def dot(x: ParamVector, y: ParamVector) -> float:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    return float(np.dot(x, y))


def require_finite(values: NDArray[np.float64] | float, what: str) -> None:
    """Raise ``NonFiniteError`` naming ``what`` when ``values`` holds NaN or infinity."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} is not finite")
