from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from aptsbench.config import HessianProxy, TrParams
from aptsbench.errors import DomainError, NonFiniteError
from aptsbench.models.objectives import FULL, BatchRef, quadratic_objective, rosenbrock_objective
from aptsbench.numeric import Norm, ParamVector, norm
from aptsbench.optim.trust_region import (
    IdentityHessian,
    LbfgsHessian,
    TrModel,
    init_tr_state,
    rho,
    solve_subproblem,
    tr_run,
    tr_step,
    update_radius,
)


@dataclass(frozen=True)
class Cliff:
    """``1/2 ||x||^2`` on ``x_0 >= 1.5`` and a constant value to the left of it."""

    value_left: float = math.inf
    dim: int = 2

    def evaluate(self, theta: ParamVector, batch: BatchRef = FULL) -> tuple[float, ParamVector]:
        if theta[0] < 1.5:
            return self.value_left, theta.copy()
        return 0.5 * float(np.dot(theta, theta)), theta.copy()


def _spd_pairs(dim: int, count: int, seed: int) -> tuple[list[ParamVector], list[ParamVector]]:
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(dim, dim))
    curvature = basis @ basis.T + dim * np.eye(dim)
    s_pairs = [rng.normal(size=dim) for _ in range(count)]
    return s_pairs, [curvature @ s for s in s_pairs]


def test_identity_model_in_two_norm__is_a_scaled_steepest_descent_step() -> None:
    g = np.array([2.0, 0.0])

    np.testing.assert_allclose(solve_subproblem(TrModel(g), 1.0), [-1.0, 0.0])
    np.testing.assert_allclose(solve_subproblem(TrModel(g), 5.0), [-2.0, 0.0])


def test_identity_model_in_max_norm__beats_every_grid_point() -> None:
    g = np.array([3.0, -4.0])
    model = TrModel(g)

    step = solve_subproblem(model, 1.0, Norm.LINF)
    axis = np.linspace(-1.0, 1.0, 2001)
    grid = (g[0] * axis + 0.5 * axis**2)[:, None] + (g[1] * axis + 0.5 * axis**2)[None, :]

    np.testing.assert_allclose(step, [-1.0, 1.0])
    assert grid.min() >= model.value(step) - 1e-12


def test_zero_gradient__gives_a_zero_step() -> None:
    for hessian in (IdentityHessian(), LbfgsHessian()):
        step = solve_subproblem(TrModel(np.zeros(3), hessian), 1.0, Norm.LINF)
        assert not np.any(step)


def test_nonpositive_radius__raises_domain_error() -> None:
    with pytest.raises(DomainError):
        solve_subproblem(TrModel(np.ones(2)), 0.0)


def test_lbfgs_steps__stay_feasible_and_decrease_the_model() -> None:
    s_pairs, y_pairs = _spd_pairs(6, 4, seed=1)
    hessian = LbfgsHessian(memory=4, s_pairs=tuple(s_pairs), y_pairs=tuple(y_pairs))
    model = TrModel(np.random.default_rng(2).normal(size=6), hessian)

    for kind in (Norm.L2, Norm.LINF):
        for delta in (1e-3, 0.1, 10.0):
            step = solve_subproblem(model, delta, kind)
            assert norm(step, kind) <= delta * (1.0 + 1e-12)
            assert model.decrease(step) > 0.0


def test_lbfgs_operator__is_symmetric_positive_definite_and_satisfies_secant() -> None:
    s_pairs, y_pairs = _spd_pairs(5, 3, seed=0)
    hessian = LbfgsHessian(memory=5)
    for s, y in zip(s_pairs, y_pairs, strict=True):
        hessian = hessian.with_pair(s, y)
    rng = np.random.default_rng(4)
    u, v = rng.normal(size=5), rng.normal(size=5)

    assert hessian.pair_count == 3
    forward = float(np.dot(u, hessian.apply(v)))
    assert forward == pytest.approx(float(np.dot(v, hessian.apply(u))), rel=1e-10)
    assert float(np.dot(v, hessian.apply(v))) > 0.0
    np.testing.assert_allclose(hessian.apply(s_pairs[-1]), y_pairs[-1], rtol=1e-10)


def test_lbfgs__skips_nonpositive_curvature_and_respects_memory() -> None:
    hessian = LbfgsHessian(memory=2)
    s = np.array([1.0, 0.0])

    assert hessian.with_pair(s, -s) is hessian
    for scale in (1.0, 2.0, 3.0):
        hessian = hessian.with_pair(scale * s, 2.0 * scale * s)
    assert hessian.pair_count == 2
    with pytest.raises(DomainError):
        LbfgsHessian(memory=0)


def test_rho__ratio_and_nonpositive_prediction() -> None:
    assert rho(2.0, 0.5, 1.5) == pytest.approx(1.0)
    assert rho(1.0, 1.2, 0.5) == pytest.approx(-0.4)
    assert rho(1.0, 0.0, 0.0) == -math.inf


def test_update_radius__eta1_boundary_is_a_rejection() -> None:
    params = TrParams()

    assert update_radius(0.1, 1.0, params) == (False, 0.5)
    assert update_radius(0.5, 1.0, params) == (True, 1.0)
    assert update_radius(0.75, 1.0, params) == (True, 2.0)
    assert update_radius(0.9, 9e3, params) == (True, params.delta_max)


def test_tr_step__accepts_and_expands_on_an_exact_model() -> None:
    objective = quadratic_objective(np.ones(2), np.zeros(2))
    state = init_tr_state(objective, np.array([2.0, 0.0]), 1.0, TrParams())

    after = tr_step(objective, state, TrParams())

    np.testing.assert_allclose(after.theta, [1.0, 0.0])
    assert after.delta == 2.0
    assert after.history[-1].accepted
    assert after.history[-1].rho == pytest.approx(1.0)


def test_tr_step_into_infinite_value__rejects_and_keeps_iterate() -> None:
    objective = Cliff()
    params = TrParams()
    state = init_tr_state(objective, np.array([2.0, 0.0]), 1.0, params)

    after = tr_step(objective, state, params)

    np.testing.assert_array_equal(after.theta, state.theta)
    assert after.delta == 0.5
    assert not after.history[-1].accepted


def test_tr_step_into_nan__raises_non_finite_error() -> None:
    objective = Cliff(value_left=math.nan)
    params = TrParams()
    state = init_tr_state(objective, np.array([2.0, 0.0]), 1.0, params)

    with pytest.raises(NonFiniteError):
        tr_step(objective, state, params)


def test_tr_run_with_zero_iterations__returns_the_start() -> None:
    state = tr_run(rosenbrock_objective(), np.array([-1.2, 1.0]), 1.0, TrParams(), 0)

    np.testing.assert_array_equal(state.theta, [-1.2, 1.0])
    assert state.iterations == 0


def test_tr_run_on_quadratic__converges() -> None:
    objective = quadratic_objective(np.array([1.0, 2.0, 0.5]), np.array([1.0, -1.0, 2.0]))

    state = tr_run(objective, np.zeros(3), 1.0, TrParams(), 30)

    assert norm(state.grad) < 1e-10
    np.testing.assert_allclose(state.theta, objective.minimizer, atol=1e-10)


def test_tr_run_on_rosenbrock_with_lbfgs__reaches_the_minimum() -> None:
    params = TrParams(hessian=HessianProxy.LBFGS)

    state = tr_run(rosenbrock_objective(), np.array([-1.2, 1.0]), 1.0, params, 500)

    assert state.f_value < 1e-8
    np.testing.assert_allclose(state.theta, [1.0, 1.0], atol=1e-3)


def test_tr_run_on_rosenbrock_with_identity__descends_monotonically() -> None:
    state = tr_run(rosenbrock_objective(), np.array([-1.2, 1.0]), 1.0, TrParams(), 5000)

    accepted = [record for record in state.history if record.accepted]
    assert state.f_value < 1e-4
    assert all(record.f_after < record.f_before for record in accepted)
    assert all(
        later.f_before <= earlier.f_before
        for earlier, later in zip(state.history, state.history[1:], strict=False)
    )


@pytest.mark.parametrize("kind", [Norm.L2, Norm.LINF])
def test_fixed_radius_inner_run__stays_inside_the_outer_ball(kind: Norm) -> None:
    rng = np.random.default_rng(7)
    objective = quadratic_objective(rng.uniform(0.5, 3.0, size=6), rng.normal(size=6) * 10.0)
    params = TrParams(gamma_inc=1.0, norm=kind)
    outer = 0.3
    theta0 = rng.normal(size=6)

    state = tr_run(objective, theta0, outer / 5, params, 5)

    assert norm(state.theta - theta0, kind) <= outer + 1e-12


def test_new_batch__reanchors_before_stepping() -> None:
    objective = quadratic_objective(np.ones(2), np.zeros(2))
    params = TrParams()
    state = init_tr_state(objective, np.array([2.0, 0.0]), 1.0, params)
    other = BatchRef(np.array([0]))

    after = tr_step(objective, state, params, other)

    assert after.batch is other
    assert after.history[-1].accepted


def test_random_subproblems__never_leave_the_trust_region() -> None:
    rng = np.random.default_rng(17)

    for trial in range(200):
        dim = int(rng.integers(1, 9))
        s_pairs, y_pairs = _spd_pairs(dim, int(rng.integers(1, 4)), seed=trial)
        hessian = (
            IdentityHessian()
            if trial % 2
            else LbfgsHessian(memory=4, s_pairs=tuple(s_pairs), y_pairs=tuple(y_pairs))
        )
        model = TrModel(rng.normal(size=dim) * 10.0 ** rng.uniform(-2.0, 2.0), hessian)
        delta = 10.0 ** rng.uniform(-4.0, 2.0)
        for kind in (Norm.L2, Norm.LINF):
            assert norm(solve_subproblem(model, delta, kind), kind) <= delta * (1.0 + 1e-12)


@pytest.mark.parametrize("hessian", [HessianProxy.IDENTITY, HessianProxy.LBFGS])
def test_tr_run_steps__stay_inside_the_radius_of_their_iteration(hessian: HessianProxy) -> None:
    params = TrParams(norm=Norm.LINF, hessian=hessian)
    objective = rosenbrock_objective(4)
    state = init_tr_state(objective, np.array([-1.2, 1.0, -0.5, 0.3]), 0.5, params)

    for _ in range(200):
        previous, radius = state.theta, state.delta
        state = tr_step(objective, state, params)
        assert norm(state.theta - previous, Norm.LINF) <= radius + 1e-12
