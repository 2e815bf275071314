"""Objective functions evaluated jointly for value and gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
from numpy.typing import NDArray

from aptsbench.errors import DimensionError, DomainError
from aptsbench.models.network import LayerCache, MlpSpec, backward, forward
from aptsbench.numeric import ParamVector, as_param_vector


@dataclass(frozen=True, eq=False)
class BatchRef:
    """Subset of dataset rows; ``indices=None`` selects the full dataset."""

    indices: NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        if self.indices is None:
            return
        indices = np.asarray(self.indices, dtype=np.int64)
        if indices.ndim != 1 or indices.size == 0:
            raise DomainError("a batch needs a nonempty one-dimensional index array")
        object.__setattr__(self, "indices", indices)

    @property
    def is_full(self) -> bool:
        return self.indices is None

    def size(self, total: int) -> int:
        return total if self.indices is None else int(self.indices.size)

    def select(self, total: int) -> NDArray[np.int64] | slice:
        """Return an indexer into arrays with ``total`` rows."""
        if self.indices is None:
            return slice(None)
        if self.indices.min() < 0 or self.indices.max() >= total:
            raise DomainError(f"batch indices fall outside [0, {total})")
        return self.indices


FULL = BatchRef()


@runtime_checkable
class Objective(Protocol):
    """Value-and-gradient oracle; implementations must be safe for concurrent reads."""

    @property
    def dim(self) -> int: ...

    def evaluate(self, theta: ParamVector, batch: BatchRef = FULL) -> tuple[float, ParamVector]:
        ...


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """Separable quadratic ``1/2 sum a_i x_i^2 - sum b_i x_i``; the batch is ignored."""

    a_diag: ParamVector
    b: ParamVector

    @property
    def dim(self) -> int:
        return int(self.a_diag.shape[0])

    def evaluate(self, theta: ParamVector, batch: BatchRef = FULL) -> tuple[float, ParamVector]:
        del batch
        _check_dim(theta, self.dim)
        value = 0.5 * float(np.dot(self.a_diag * theta, theta)) - float(np.dot(self.b, theta))
        return value, self.a_diag * theta - self.b

    @property
    def minimizer(self) -> ParamVector:
        result: ParamVector = self.b / self.a_diag
        return result


@dataclass(frozen=True)
class RosenbrockObjective:
    """Chained Rosenbrock function; ``dim=2`` is the classic banana valley."""

    dim: int = 2

    def evaluate(self, theta: ParamVector, batch: BatchRef = FULL) -> tuple[float, ParamVector]:
        del batch
        _check_dim(theta, self.dim)
        head = theta[:-1]
        tail = theta[1:]
        valley = tail - head**2
        value = float(np.sum(100.0 * valley**2 + (1.0 - head) ** 2))
        grad = np.zeros_like(theta)
        grad[:-1] += -400.0 * head * valley - 2.0 * (1.0 - head)
        grad[1:] += 200.0 * valley
        return value, grad


@dataclass(frozen=True, eq=False)
class NetworkObjective:
    """Mean training loss of an MLP over a labelled dataset."""

    spec: MlpSpec
    inputs: NDArray[np.float64]
    targets: NDArray[np.generic]
    sample_count: int = field(init=False)

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != np.asarray(self.targets).shape[0]:
            raise DimensionError("inputs and targets must have the same number of rows")
        object.__setattr__(self, "sample_count", int(self.inputs.shape[0]))

    @property
    def dim(self) -> int:
        return self.spec.param_count

    def evaluate(self, theta: ParamVector, batch: BatchRef = FULL) -> tuple[float, ParamVector]:
        loss, grad, _ = self.evaluate_with_cache(theta, batch)
        return loss, grad

    def evaluate_with_cache(
        self,
        theta: ParamVector,
        batch: BatchRef = FULL,
    ) -> tuple[float, ParamVector, LayerCache]:
        """Full forward and backward pass, returning the populated layer cache as well."""
        rows = batch.select(self.sample_count)
        _, cache = forward(self.spec, theta, self.inputs[rows])
        return backward(self.spec, cache, np.asarray(self.targets)[rows])

    def accuracy(self, theta: ParamVector, batch: BatchRef = FULL) -> float:
        rows = batch.select(self.sample_count)
        predictions, _ = forward(self.spec, theta, self.inputs[rows])
        labels = np.asarray(self.targets)[rows]
        if labels.ndim == 2:
            labels = np.argmax(labels, axis=1)
        return float(np.mean(np.argmax(predictions, axis=1) == labels))


def quadratic_objective(a_diag: NDArray[np.float64], b: NDArray[np.float64]) -> QuadraticObjective:
    diag = as_param_vector(a_diag, name="A_diag")
    offset = as_param_vector(b, name="b")
    if diag.shape != offset.shape:
        raise DimensionError(f"A_diag has length {diag.shape[0]}, b has {offset.shape[0]}")
    if np.any(diag <= 0.0):
        raise DomainError("quadratic diagonal entries must be positive")
    return QuadraticObjective(a_diag=diag, b=offset)


def rosenbrock_objective(dim: int = 2) -> RosenbrockObjective:
    if dim < 2:
        raise DomainError("Rosenbrock needs at least two variables")
    return RosenbrockObjective(dim=dim)


def finite_diff_grad(
    obj: Objective,
    theta: ParamVector,
    h: float = 1e-6,
    batch: BatchRef = FULL,
) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0.0:
        raise DomainError("finite-difference step must be positive")
    grad = np.zeros_like(theta, dtype=np.float64)
    shifted = np.array(theta, dtype=np.float64, copy=True)
    for index in range(shifted.shape[0]):
        original = shifted[index]
        shifted[index] = original + h
        upper, _ = obj.evaluate(shifted, batch)
        shifted[index] = original - h
        lower, _ = obj.evaluate(shifted, batch)
        shifted[index] = original
        grad[index] = (upper - lower) / (2.0 * h)
    return grad


def gradient_relative_error(analytic: ParamVector, reference: ParamVector) -> float:
    """Norm-wise relative difference, guarded for gradients that vanish."""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(reference)), 1e-8)
    return float(np.linalg.norm(analytic - reference)) / scale


def check_gradient(
    obj: Objective,
    theta: ParamVector,
    h: float = 1e-6,
    batch: BatchRef = FULL,
) -> float:
    _, analytic = obj.evaluate(theta, batch)
    return gradient_relative_error(analytic, finite_diff_grad(obj, theta, h, batch))


def _check_dim(theta: ParamVector, dim: int) -> None:
    if theta.shape != (dim,):
        raise DimensionError(f"expected a vector of length {dim}, got shape {theta.shape}")
