import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elastic_ot.costlearn import (StepSchedule, learn_subspace, loss_and_grad, recovery_error,
                                  riemannian_grad, stiefel_project)
from elastic_ot.costs import ElasticCost, Regularizer, StiefelMatrix
from elastic_ot.sinkhorn import DiscreteProblem, SinkhornSettings, primal_plan, solve_duals
from elastic_ot.synth import GenerationSpec, generate_benchmark

seeds = st.integers(0, 2**32 - 1)


def subspace_problem(X, Y, A, gamma, eps):
    return DiscreteProblem(X, Y, ElasticCost(gamma, Regularizer.subspace(A)), eps)


def tangent_direction(rng, A):
    xi = riemannian_grad(A, rng.standard_normal(A.shape))
    return xi / np.linalg.norm(xi)


def directional_fd(X, Y, A, gamma, eps, xi, unroll, step=1e-5):
    def L(M):
        return loss_and_grad(subspace_problem(X, Y, stiefel_project(M), gamma, eps), unroll).loss
    return (L(A + step * xi) - L(A - step * xi)) / (2 * step)


# ---- manifold tools

def test_stiefel_project_examples(rng):
    A = stiefel_project(rng.standard_normal((2, 5))).entries
    np.testing.assert_allclose(stiefel_project(A).entries, A, atol=1e-10)
    np.testing.assert_allclose(stiefel_project(3.0 * A).entries, A, atol=1e-10)
    B = stiefel_project(rng.standard_normal((2, 5))).entries
    np.testing.assert_allclose(B @ B.T, np.eye(2), atol=1e-10)


def test_stiefel_project_rejects_rank_deficient():
    with pytest.raises(ValueError, match="singular value"):
        stiefel_project(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        stiefel_project(np.ones((3, 2)))


@given(seed=seeds)
@settings(max_examples=100)
def test_projection_idempotent(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 10))
    p = int(rng.integers(1, d + 1))
    A = stiefel_project(rng.standard_normal((p, d))).entries
    np.testing.assert_allclose(A @ A.T, np.eye(p), atol=1e-10)
    np.testing.assert_allclose(stiefel_project(A).entries, A, atol=1e-10)


def test_riemannian_grad_examples(rng):
    A = stiefel_project(rng.standard_normal((2, 5))).entries
    np.testing.assert_allclose(riemannian_grad(A, A), 0.0, atol=1e-12)
    np.testing.assert_array_equal(riemannian_grad(A, np.zeros_like(A)), 0.0)
    with pytest.raises(ValueError):
        riemannian_grad(A, np.zeros((3, 5)))


@given(seed=seeds)
@settings(max_examples=100)
def test_riemannian_grad_is_tangent(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 10))
    p = int(rng.integers(1, d + 1))
    A = stiefel_project(rng.standard_normal((p, d))).entries
    xi = riemannian_grad(A, 3 * rng.standard_normal((p, d)))
    assert np.max(np.abs(A @ xi.T + xi @ A.T)) <= 1e-10


def test_recovery_error_examples(rng):
    A = stiefel_project(rng.standard_normal((2, 6))).entries
    assert recovery_error(A, A) == pytest.approx(0.0, abs=1e-12)
    assert recovery_error([[1, 0, 0, 0]], [[0, 1, 0, 0]]) == 1.0
    Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    assert recovery_error(A, Q @ A[::-1]) <= 1e-10
    wider = np.vstack([A, stiefel_project(rng.standard_normal((1, 6))).entries])
    assert recovery_error(A, stiefel_project(wider)) <= 1e-10
    with pytest.raises(ValueError):
        recovery_error(A, np.eye(5)[:2])


@given(seed=seeds)
@settings(max_examples=50)
def test_recovery_error_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 8))
    A = stiefel_project(rng.standard_normal((int(rng.integers(1, d + 1)), d)))
    B = stiefel_project(rng.standard_normal((int(rng.integers(1, d + 1)), d)))
    assert -1e-12 <= recovery_error(A, B) <= 1 + 1e-12


def test_step_schedule():
    s = StepSchedule()
    assert s(0) == 0.1
    assert s(3) == pytest.approx(0.05)


# ---- loss and gradient

def test_full_rank_subspace_gives_zero_loss(rng):
    X, Y = rng.standard_normal((8, 3)), rng.standard_normal((9, 3))
    A = stiefel_project(rng.standard_normal((3, 3)))
    ev = loss_and_grad(subspace_problem(X, Y, A, 2.0, 0.5), 20)
    assert np.max(np.abs(ev.R)) <= 1e-12
    assert abs(ev.loss) <= 1e-12
    # the Euclidean term is normal to the manifold; along it tau vanishes identically
    np.testing.assert_allclose(riemannian_grad(A.entries, ev.grad_reg), 0.0, atol=1e-10)
    np.testing.assert_allclose(riemannian_grad(A.entries, ev.grad), 0.0, atol=1e-10)


def test_loss_is_plan_dot_regularizer(rng):
    X, Y = rng.standard_normal((8, 3)), rng.standard_normal((9, 3))
    A = stiefel_project(rng.standard_normal((1, 3)))
    ev = loss_and_grad(subspace_problem(X, Y, A, 1.0, 0.5), 10)
    assert ev.loss == float(np.sum(ev.plan * ev.R))
    reg = Regularizer.subspace(A)
    ref = np.array([[reg.value(y - x) for y in Y] for x in X])
    np.testing.assert_allclose(ev.R, ref, atol=1e-12)


def test_gamma_zero_gradient_is_regularizer_term(rng):
    n, d = 10, 4
    X, Y = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    A = stiefel_project(rng.standard_normal((1, d))).entries
    ev = loss_and_grad(subspace_problem(X, Y, A, 0.0, 0.5), 30)
    np.testing.assert_array_equal(ev.grad_plan, 0.0)
    xi = tangent_direction(rng, A)
    step = 1e-5

    def fixed_plan_loss(M):
        reg = Regularizer.subspace(stiefel_project(M))
        return np.sum(ev.plan * np.array([[reg.value(y - x) for y in Y] for x in X]))
    fd = (fixed_plan_loss(A + step * xi) - fixed_plan_loss(A - step * xi)) / (2 * step)
    assert abs(np.sum(ev.grad * xi) - fd) <= 1e-6 * max(1.0, abs(fd))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("unroll", [1, 20])
def test_gradient_matches_finite_differences(seed, unroll):
    rng = np.random.default_rng(seed)
    n, d = 16, 4
    X, Y = rng.standard_normal((n, d)), rng.standard_normal((n, d)) + 0.5
    A = stiefel_project(rng.standard_normal((1, d))).entries
    ev = loss_and_grad(subspace_problem(X, Y, A, 3.0, 0.3), unroll)
    for _ in range(3):
        xi = tangent_direction(rng, A)
        fd = directional_fd(X, Y, A, 3.0, 0.3, xi, unroll)
        assert abs(np.sum(ev.grad * xi) - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_gradient_through_kernel_reabsorptions(rng):
    # small epsilon forces many kernel recomputations inside the unrolled sweeps
    n, d = 12, 3
    X, Y = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    A = stiefel_project(rng.standard_normal((2, d))).entries
    ev = loss_and_grad(subspace_problem(X, Y, A, 5.0, 0.02), 40)
    xi = tangent_direction(rng, A)
    fd = directional_fd(X, Y, A, 5.0, 0.02, xi, 40, step=1e-6)
    assert abs(np.sum(ev.grad * xi) - fd) <= 1e-3 * max(abs(fd), 1e-8)


@given(seed=seeds)
@settings(max_examples=20)
def test_loss_is_span_invariant(seed):
    rng = np.random.default_rng(seed)
    d = 5
    X, Y = rng.standard_normal((10, d)), rng.standard_normal((11, d))
    A = stiefel_project(rng.standard_normal((2, d))).entries
    Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    e1 = loss_and_grad(subspace_problem(X, Y, A, 2.0, 0.5), 30)
    e2 = loss_and_grad(subspace_problem(X, Y, StiefelMatrix(Q @ A), 2.0, 0.5), 30)
    np.testing.assert_allclose(e1.R, e2.R, atol=1e-8)
    np.testing.assert_allclose(e1.plan, e2.plan, atol=1e-8)
    assert abs(e1.loss - e2.loss) <= 1e-8


def test_unrolled_loss_matches_converged_solver(rng):
    d = 3
    X, Y = rng.standard_normal((15, d)), rng.standard_normal((14, d))
    A = stiefel_project(rng.standard_normal((1, d)))
    prob = subspace_problem(X, Y, A, 1.5, 0.5)
    duals = solve_duals(prob, SinkhornSettings(tol=1e-10, max_iters=100_000))
    assert duals.marginal_error <= 1e-8
    ev = loss_and_grad(prob, duals.iterations + 50)
    ref = float(np.sum(primal_plan(prob, duals).P * ev.R))
    assert abs(ev.loss - ref) <= 1e-6


def test_loss_and_grad_validation(rng):
    X = rng.standard_normal((4, 2))
    with pytest.raises(ValueError):
        loss_and_grad(DiscreteProblem(X, X, ElasticCost(1.0, Regularizer("l1")), 1.0))
    with pytest.raises(ValueError):
        loss_and_grad(subspace_problem(X, X, stiefel_project(np.ones((1, 2))), 1.0, 1.0), 0)


# ---- learning loop

def test_zero_iterations_returns_initial_state(rng):
    X, Y = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
    st = learn_subspace(X, None, Y, None, 2, 1.0, 0.5, iters=0, seed=3)
    A = st.A.entries
    assert A.shape == (2, 4)
    np.testing.assert_allclose(A @ A.T, np.eye(2), atol=1e-10)
    assert st.loss_history == []


def test_learning_stays_on_manifold_and_is_deterministic(rng):
    X, Y = rng.standard_normal((30, 5)), rng.standard_normal((30, 5))
    seen = []

    def check(i, state):
        A = state.A.entries
        seen.append(np.max(np.abs(A @ A.T - np.eye(2))))

    st1 = learn_subspace(X, None, Y, None, 2, 1.0, 0.2, iters=40, seed=5, callback=check)
    st2 = learn_subspace(X, None, Y, None, 2, 1.0, 0.2, iters=40, seed=5)
    assert max(seen) <= 1e-8
    assert all(np.isfinite(st1.loss_history))
    np.testing.assert_array_equal(st1.A.entries, st2.A.entries)
    assert st1.loss_history == st2.loss_history
    assert st1.best_loss == min(st1.loss_history)
    assert st1.eta_history[:2] == [0.1, 0.1 / np.sqrt(2)]


def test_full_dimension_gives_zero_loss_trajectory(rng):
    X, Y = rng.standard_normal((12, 3)), rng.standard_normal((12, 3))
    st = learn_subspace(X, None, Y, None, 3, 1.0, 0.5, iters=10)
    assert max(abs(v) for v in st.loss_history) <= 1e-12


def test_learning_recovers_ninety_percent_inertia_subspace():
    spec = GenerationSpec(seed=0, d=6, n=512, n_test=1, potential="icnn", cost_kind="subspace",
                          p_star=2, sv_target=0.9)
    bm = generate_benchmark(spec)
    A_star = np.array(bm.metadata["cost"]["A"])
    X, Y = bm.X_train, bm.Y_train
    eps = 0.01 * np.mean(0.5 * np.sum((X[:, None] - Y[None]) ** 2, -1))
    st = learn_subspace(X, None, Y, None, 2, 1.0, eps, iters=1000, seed=0, A_star=A_star)
    assert recovery_error(A_star, st.best_A) < 0.05
    assert len(st.recovery_history) == 1000
