from __future__ import annotations

import numpy as np
import pytest

from aptsbench.errors import DimensionError, DomainError, StateError
from aptsbench.models.network import (
    Activation,
    MlpSpec,
    backward,
    block_layers,
    forward,
    init_params,
    layer_slices,
    local_grad_from_cache,
    pack,
    unpack,
)
from aptsbench.models.objectives import NetworkObjective, check_gradient


def _classifier_problem(
    hidden: Activation = Activation.TANH,
    seed: int = 0,
) -> tuple[MlpSpec, NetworkObjective]:
    spec = MlpSpec.build(3, [5, 4], 3, hidden=hidden)
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(12, 3))
    labels = rng.integers(0, 3, size=12)
    return spec, NetworkObjective(spec=spec, inputs=inputs, targets=labels)


def test_param_count__counts_weights_and_biases() -> None:
    spec = MlpSpec.parse("2-3-2")

    assert spec.param_count == (2 + 1) * 3 + (3 + 1) * 2
    assert spec.layer_count == 2
    assert spec.is_classifier


def test_parse_bad_model__raises_domain_error() -> None:
    with pytest.raises(DomainError):
        MlpSpec.parse("2-x-2")
    with pytest.raises(DomainError):
        MlpSpec.parse("2-2")


def test_layer_slices__tile_the_parameter_vector() -> None:
    spec = MlpSpec.parse("4-3-2")
    slices = layer_slices(spec)

    assert slices[0].start == 0
    assert slices[0].stop == slices[1].start
    assert slices[-1].stop == spec.param_count
    assert slices[1].weight_len == 6


def test_unpack_then_pack__returns_the_same_vector() -> None:
    spec = MlpSpec.parse("3-4-2")
    theta = init_params(spec, seed=5)

    params = unpack(spec, theta)

    assert params[0][0].shape == (4, 3)
    np.testing.assert_array_equal(pack(spec, params), theta)


def test_init_params__is_seeded_with_zero_biases() -> None:
    spec = MlpSpec.parse("3-4-2")

    first = init_params(spec, seed=1)
    second = init_params(spec, seed=1)

    np.testing.assert_array_equal(first, second)
    for _, bias in unpack(spec, first):
        assert not np.any(bias)


@pytest.mark.parametrize("hidden", [Activation.TANH, Activation.IDENTITY])
def test_backprop_gradient__matches_finite_differences(hidden: Activation) -> None:
    spec, objective = _classifier_problem(hidden)
    theta = init_params(spec, seed=3)

    assert check_gradient(objective, theta) < 1e-6


def test_relu_backprop__matches_finite_differences() -> None:
    spec, objective = _classifier_problem(Activation.RELU, seed=4)
    theta = init_params(spec, seed=4)

    assert check_gradient(objective, theta) < 1e-5


def test_squared_loss_head__matches_finite_differences() -> None:
    spec = MlpSpec.build(2, [4], 1, hidden=Activation.TANH, head=Activation.IDENTITY)
    rng = np.random.default_rng(2)
    objective = NetworkObjective(
        spec=spec,
        inputs=rng.normal(size=(6, 2)),
        targets=rng.normal(size=(6, 1)),
    )

    assert check_gradient(objective, init_params(spec, seed=2)) < 1e-6


def test_forward_with_wrong_width__raises_dimension_error() -> None:
    spec = MlpSpec.parse("3-4-2")

    with pytest.raises(DimensionError):
        forward(spec, init_params(spec, 0), np.zeros((2, 5)))


def test_backward_without_forward__raises_state_error() -> None:
    spec = MlpSpec.parse("3-4-2")

    with pytest.raises(StateError):
        backward(spec, None, np.zeros(2, dtype=np.int64))


def test_backward__populates_cache_and_probabilities_sum_to_one() -> None:
    spec, objective = _classifier_problem()
    theta = init_params(spec, seed=0)

    predictions, cache = forward(spec, theta, objective.inputs)
    _, _, completed = backward(spec, cache, objective.targets)

    assert not cache.populated
    assert completed.populated
    np.testing.assert_allclose(predictions.sum(axis=1), 1.0, atol=1e-12)


def test_local_grad_at_caching_point__equals_exact_gradient_slice() -> None:
    spec, objective = _classifier_problem()
    theta = init_params(spec, seed=7)
    _, grad, cache = objective.evaluate_with_cache(theta)
    slices = layer_slices(spec)

    for block in ((0,), (1, 2), (0, 1, 2)):
        start, stop = slices[block[0]].start, slices[block[-1]].stop
        local = local_grad_from_cache(spec, theta[start:stop].copy(), cache, block)
        np.testing.assert_allclose(local, grad[start:stop], rtol=0.0, atol=1e-12)


def test_local_grad_without_backward__raises_state_error() -> None:
    spec, objective = _classifier_problem()
    theta = init_params(spec, seed=0)
    _, cache = forward(spec, theta, objective.inputs)

    with pytest.raises(StateError):
        local_grad_from_cache(spec, theta[: layer_slices(spec)[0].stop], cache, (0,))


def test_block_layers__requires_contiguous_blocks() -> None:
    spec = MlpSpec.parse("3-4-4-2")

    assert block_layers(spec, [2, 1]) == (1, 2)
    with pytest.raises(DomainError):
        block_layers(spec, [0, 2])
    with pytest.raises(DomainError):
        block_layers(spec, [])


def _random_problem(rng: np.random.Generator) -> tuple[MlpSpec, NetworkObjective, np.ndarray]:
    hidden = [int(width) for width in rng.integers(1, 9, size=int(rng.integers(1, 4)))]
    classes = int(rng.integers(2, 5))
    activation = Activation.TANH if rng.random() < 0.5 else Activation.IDENTITY
    spec = MlpSpec.build(int(rng.integers(1, 7)), hidden, classes, hidden=activation)
    samples = int(rng.integers(1, 9))
    objective = NetworkObjective(
        spec=spec,
        inputs=rng.normal(size=(samples, spec.input_dim)),
        targets=rng.integers(0, classes, size=samples),
    )
    return spec, objective, rng.normal(size=spec.param_count) * 0.5


def test_random_networks__backprop_matches_finite_differences() -> None:
    rng = np.random.default_rng(12)

    for _ in range(50):
        spec, objective, theta = _random_problem(rng)
        assert spec.layer_count <= 4
        assert spec.param_count <= 2000
        assert check_gradient(objective, theta) < 1e-5


def test_batched_forward__matches_one_sample_at_a_time() -> None:
    rng = np.random.default_rng(13)
    spec, objective, theta = _random_problem(rng)

    predictions, _ = forward(spec, theta, objective.inputs)
    batch_loss, _ = objective.evaluate(theta)

    losses = []
    for row in range(objective.sample_count):
        single, _ = forward(spec, theta, objective.inputs[row : row + 1])
        np.testing.assert_allclose(single[0], predictions[row], rtol=1e-12, atol=1e-14)
        only = NetworkObjective(
            spec=spec,
            inputs=objective.inputs[row : row + 1],
            targets=objective.targets[row : row + 1],
        )
        losses.append(only.evaluate(theta)[0])
    assert batch_loss == pytest.approx(float(np.mean(losses)), rel=1e-12)


def test_local_grad_away_from_caching_point__errs_to_first_order() -> None:
    spec, objective = _classifier_problem(seed=9)
    theta = init_params(spec, seed=9)
    _, _, cache = objective.evaluate_with_cache(theta)
    first = layer_slices(spec)[0]
    direction = np.random.default_rng(9).normal(size=first.stop - first.start)
    direction /= np.linalg.norm(direction)

    errors = []
    for delta in (1e-3, 1e-4, 1e-5):
        moved = theta.copy()
        moved[first.start : first.stop] += delta * direction
        _, exact = objective.evaluate(moved)
        local = local_grad_from_cache(spec, moved[first.start : first.stop], cache, (0,))
        errors.append(float(np.linalg.norm(local - exact[first.start : first.stop])))

    assert errors[0] > 0.0
    assert errors[2] < errors[0] / 50.0
    slopes = [error / delta for error, delta in zip(errors, (1e-3, 1e-4, 1e-5), strict=True)]
    assert max(slopes) <= 2.0 * min(slopes)
