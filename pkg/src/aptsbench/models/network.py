"""Multilayer perceptron with explicit per-layer passes and layer-boundary caching."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from aptsbench.errors import DimensionError, DomainError, StateError
from aptsbench.numeric import ParamVector

Matrix = NDArray[np.float64]


class Activation(StrEnum):
    """Per-layer nonlinearity; ``softmax_ce`` is the fused softmax + cross-entropy head."""

    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"
    SOFTMAX_CE = "softmax_ce"


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[q, h_1, ..., h_L, p]`` and one activation per weight layer."""

    layer_sizes: tuple[int, ...]
    activations: tuple[Activation, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(size) for size in self.layer_sizes))
        object.__setattr__(
            self,
            "activations",
            tuple(Activation(activation) for activation in self.activations),
        )
        if len(self.layer_sizes) < 3:
            raise DomainError("an MLP needs an input layer, a hidden layer, and an output layer")
        if any(size < 1 for size in self.layer_sizes):
            raise DomainError(f"layer sizes must be positive, got {list(self.layer_sizes)}")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise DimensionError(
                f"{len(self.layer_sizes) - 1} weight layers need as many activations, "
                f"got {len(self.activations)}",
            )
        if Activation.SOFTMAX_CE in self.activations[:-1]:
            raise DomainError("softmax_ce is only valid as the output head")
        if self.activations[-1] is Activation.SOFTMAX_CE and self.layer_sizes[-1] < 2:
            raise DomainError("a softmax head needs at least two classes")

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden_sizes: Sequence[int],
        output_dim: int,
        hidden: Activation | str = Activation.TANH,
        head: Activation | str = Activation.SOFTMAX_CE,
    ) -> MlpSpec:
        sizes = (input_dim, *hidden_sizes, output_dim)
        activations = (*([Activation(hidden)] * len(hidden_sizes)), Activation(head))
        return cls(layer_sizes=sizes, activations=activations)

    @classmethod
    def parse(
        cls,
        text: str,
        hidden: Activation | str = Activation.TANH,
        head: Activation | str = Activation.SOFTMAX_CE,
    ) -> MlpSpec:
        """Parse a dash-separated width list such as ``"2-16-16-2"``."""
        try:
            sizes = [int(part) for part in text.split("-")]
        except ValueError as exc:
            raise DomainError(f"Cannot parse model '{text}'; expected e.g. '2-16-16-2'.") from exc
        if len(sizes) < 3:
            raise DomainError(f"Model '{text}' needs at least one hidden layer.")
        return cls.build(sizes[0], sizes[1:-1], sizes[-1], hidden=hidden, head=head)

    @property
    def layer_count(self) -> int:
        return len(self.activations)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def is_classifier(self) -> bool:
        return self.activations[-1] is Activation.SOFTMAX_CE

    @property
    def param_count(self) -> int:
        return sum(
            (fan_in + 1) * fan_out
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:], strict=True)
        )


@dataclass(frozen=True)
class LayerSlice:
    """Location of one layer's weight matrix and bias vector inside the flat parameter vector."""

    layer_index: int
    fan_in: int
    fan_out: int
    weight_offset: int
    weight_len: int
    bias_offset: int
    bias_len: int

    @property
    def start(self) -> int:
        return self.weight_offset

    @property
    def stop(self) -> int:
        return self.bias_offset + self.bias_len


@dataclass(frozen=True, eq=False)
class LayerCache:
    """
    Activations and boundary gradients captured by one forward/backward pass.

    ``inputs[i]`` is the activation entering layer ``i`` (``inputs[0]`` is the batch) and
    ``pre_activations[i]`` the affine output of layer ``i``. After ``backward``, ``downstream[i]``
    holds the derivative of the loss with respect to the output of layer ``i``; for the output
    layer that output is the pre-head value, so the loss head itself is folded into the factor.
    """

    theta: ParamVector
    inputs: tuple[Matrix, ...]
    pre_activations: tuple[Matrix, ...]
    predictions: Matrix
    downstream: tuple[Matrix, ...] | None = field(default=None)

    @property
    def populated(self) -> bool:
        return self.downstream is not None


def layer_slices(spec: MlpSpec) -> tuple[LayerSlice, ...]:
    slices: list[LayerSlice] = []
    offset = 0
    for index, (fan_in, fan_out) in enumerate(
        zip(spec.layer_sizes[:-1], spec.layer_sizes[1:], strict=True),
    ):
        weight_len = fan_in * fan_out
        slices.append(
            LayerSlice(
                layer_index=index,
                fan_in=fan_in,
                fan_out=fan_out,
                weight_offset=offset,
                weight_len=weight_len,
                bias_offset=offset + weight_len,
                bias_len=fan_out,
            ),
        )
        offset += weight_len + fan_out
    return tuple(slices)


def unpack(spec: MlpSpec, theta: ParamVector) -> list[tuple[Matrix, Matrix]]:
    """Return ``(W, b)`` views per layer; ``W`` has shape ``(fan_out, fan_in)``."""
    if theta.shape != (spec.param_count,):
        raise DimensionError(
            f"parameter vector has length {theta.shape[0]}, model expects {spec.param_count}",
        )
    return [_layer_params(theta, layer, base=0) for layer in layer_slices(spec)]


def pack(spec: MlpSpec, params: Iterable[tuple[Matrix, Matrix]]) -> ParamVector:
    pieces: list[Matrix] = []
    for layer, (weights, bias) in zip(layer_slices(spec), params, strict=True):
        if weights.shape != (layer.fan_out, layer.fan_in) or bias.shape != (layer.fan_out,):
            raise DimensionError(f"layer {layer.layer_index} parameters have the wrong shape")
        pieces.extend((weights.ravel(), bias))
    return np.concatenate(pieces).astype(np.float64, copy=False)


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    params: list[tuple[Matrix, Matrix]] = []
    for layer in layer_slices(spec):
        limit = math.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        weights = rng.uniform(-limit, limit, size=(layer.fan_out, layer.fan_in))
        params.append((weights, np.zeros(layer.fan_out)))
    return pack(spec, params)


def forward(spec: MlpSpec, theta: ParamVector, inputs: Matrix) -> tuple[Matrix, LayerCache]:
    """Run the network on ``inputs`` and keep every layer's entering activation."""
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionError(
            f"inputs must have shape (batch, {spec.input_dim}), got {inputs.shape}",
        )
    params = unpack(spec, theta)
    entering: list[Matrix] = []
    pre_activations: list[Matrix] = []
    activation = np.array(inputs, dtype=np.float64, copy=True)
    for index, (weights, bias) in enumerate(params):
        entering.append(activation)
        z = _affine(weights, bias, activation)
        pre_activations.append(z)
        activation = _activate(spec.activations[index], z)
    cache = LayerCache(
        theta=theta.copy(),
        inputs=tuple(entering),
        pre_activations=tuple(pre_activations),
        predictions=activation,
    )
    return activation, cache


def backward(
    spec: MlpSpec,
    cache: LayerCache | None,
    targets: NDArray[np.generic],
) -> tuple[float, ParamVector, LayerCache]:
    """Return the mean loss, its gradient, and ``cache`` extended with boundary gradients."""
    if cache is None or len(cache.pre_activations) != spec.layer_count:
        raise StateError("backward needs the cache of a forward pass with the same model")
    loss, head_grad = _loss_head(spec, cache.pre_activations[-1], cache.predictions, targets)
    params = unpack(spec, cache.theta)
    grads, downstream = _backpropagate(
        spec,
        params,
        cache.inputs,
        cache.pre_activations,
        head_grad,
        first=0,
        last=spec.layer_count - 1,
    )
    flat = pack(spec, grads)
    completed = LayerCache(
        theta=cache.theta,
        inputs=cache.inputs,
        pre_activations=cache.pre_activations,
        predictions=cache.predictions,
        downstream=tuple(downstream),
    )
    return loss, flat, completed


def local_grad_from_cache(
    spec: MlpSpec,
    theta_local: ParamVector,
    cache: LayerCache,
    layers: Iterable[int],
) -> ParamVector:
    """
    Approximate the gradient of a contiguous layer block at ``theta_local``.

    The block is re-evaluated from its cached entering activation and the frozen downstream
    factor of its last layer replaces everything after the block. At the caching point the result
    is the exact gradient slice.
    """
    block = block_layers(spec, layers)
    if not cache.populated or cache.downstream is None:
        raise StateError("local gradients need a cache populated by a full backward pass")
    slices = layer_slices(spec)
    base = slices[block[0]].start
    expected = slices[block[-1]].stop - base
    if theta_local.shape != (expected,):
        raise DimensionError(
            f"block {list(block)} has {expected} parameters, got {theta_local.shape[0]}",
        )

    params = [_layer_params(theta_local, slices[index], base=base) for index in block]
    entering: list[Matrix] = []
    pre_activations: list[Matrix] = []
    activation = cache.inputs[block[0]]
    for index, (weights, bias) in zip(block, params, strict=True):
        entering.append(activation)
        z = _affine(weights, bias, activation)
        pre_activations.append(z)
        activation = _activate(spec.activations[index], z)

    grads, _ = _backpropagate(
        spec,
        params,
        tuple(entering),
        tuple(pre_activations),
        cache.downstream[block[-1]],
        first=block[0],
        last=block[-1],
    )
    return np.concatenate([piece for weights, bias in grads for piece in (weights.ravel(), bias)])


def block_layers(spec: MlpSpec, layers: Iterable[int]) -> tuple[int, ...]:
    """Validate and sort a layer block; blocks must be nonempty and contiguous in depth."""
    block = tuple(sorted(set(layers)))
    if not block:
        raise DomainError("a layer block needs at least one layer")
    if block[0] < 0 or block[-1] >= spec.layer_count:
        raise DomainError(f"layer indices {list(block)} outside [0, {spec.layer_count})")
    if block != tuple(range(block[0], block[-1] + 1)):
        raise DomainError(f"layer block {list(block)} is not contiguous")
    return block


def predict_labels(spec: MlpSpec, theta: ParamVector, inputs: Matrix) -> NDArray[np.int64]:
    predictions, _ = forward(spec, theta, inputs)
    return np.argmax(predictions, axis=1).astype(np.int64)


def _layer_params(theta: ParamVector, layer: LayerSlice, *, base: int) -> tuple[Matrix, Matrix]:
    start = layer.weight_offset - base
    weights = theta[start : start + layer.weight_len].reshape(layer.fan_out, layer.fan_in)
    bias_start = layer.bias_offset - base
    bias = theta[bias_start : bias_start + layer.bias_len]
    return weights, bias


def _affine(weights: Matrix, bias: Matrix, activation: Matrix) -> Matrix:
    result: Matrix = activation @ weights.T + bias
    return result


def _activate(kind: Activation, z: Matrix) -> Matrix:
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.SOFTMAX_CE:
        result: Matrix = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        return result
    return z


def _activation_derivative(kind: Activation, z: Matrix) -> Matrix:
    if kind is Activation.TANH:
        result: Matrix = 1.0 - np.tanh(z) ** 2
        return result
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def _loss_head(
    spec: MlpSpec,
    logits: Matrix,
    predictions: Matrix,
    targets: NDArray[np.generic],
) -> tuple[float, Matrix]:
    """Return the mean loss and its derivative with respect to the output layer's logits."""
    batch = logits.shape[0]
    if spec.is_classifier:
        one_hot = _one_hot(targets, batch, spec.output_dim)
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        loss = -float(np.sum(one_hot * log_probs)) / batch
        return loss, (np.exp(log_probs) - one_hot) / batch

    target_matrix = np.asarray(targets, dtype=np.float64)
    if target_matrix.ndim == 1:
        target_matrix = target_matrix.reshape(-1, 1)
    if target_matrix.shape != predictions.shape:
        raise DimensionError(
            f"targets have shape {target_matrix.shape}, predictions {predictions.shape}",
        )
    residual = predictions - target_matrix
    loss = 0.5 * float(np.sum(residual * residual)) / batch
    derivative = _activation_derivative(spec.activations[-1], logits)
    return loss, residual * derivative / batch


def _one_hot(targets: NDArray[np.generic], batch: int, classes: int) -> Matrix:
    array = np.asarray(targets)
    if array.ndim == 2:
        if array.shape != (batch, classes):
            raise DimensionError(f"one-hot targets need shape ({batch}, {classes})")
        return array.astype(np.float64)
    labels = array.astype(np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DomainError(f"labels must lie in [0, {classes})")
    one_hot = np.zeros((batch, classes))
    one_hot[np.arange(batch), labels] = 1.0
    return one_hot


def _backpropagate(
    spec: MlpSpec,
    params: Sequence[tuple[Matrix, Matrix]],
    entering: Sequence[Matrix],
    pre_activations: Sequence[Matrix],
    output_grad: Matrix,
    *,
    first: int,
    last: int,
) -> tuple[list[tuple[Matrix, Matrix]], list[Matrix]]:
    """
    Chain ``output_grad`` (derivative at the output of layer ``last``) back to layer ``first``.

    ``params``/``entering``/``pre_activations`` are indexed relative to ``first``. Returns the
    per-layer ``(dW, db)`` and the derivative at every layer's output.
    """
    count = last - first + 1
    grads: list[tuple[Matrix, Matrix]] = [(np.empty(0), np.empty(0))] * count
    downstream: list[Matrix] = [np.empty(0)] * count
    grad = output_grad
    for local in reversed(range(count)):
        index = first + local
        downstream[local] = grad
        if index == spec.layer_count - 1:
            delta = grad
        else:
            delta = grad * _activation_derivative(spec.activations[index], pre_activations[local])
        weights, _ = params[local]
        grads[local] = (delta.T @ entering[local], delta.sum(axis=0))
        grad = delta @ weights
    return grads, downstream
