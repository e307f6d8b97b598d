"""Learning the subspace of an elastic cost from paired-free samples.

The loss is ``L(A) = <P(A), R(A)>`` where ``P(A)`` is the entropic plan for the
cost ``0.5 * ||z||^2 + gamma * tau_A(z)`` and ``R_ij = tau_A(y_j - x_i)``.
``P(A)`` is obtained by a fixed number of log-domain Sinkhorn sweeps and the
gradient is back-propagated through those sweeps by hand. ``A`` is updated by
Riemannian gradient descent with the polar projection back onto the manifold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .costs import ElasticCost, Regularizer, StiefelMatrix
from .sinkhorn import DiscreteProblem, KernelSweeps
from ._rng import STREAM_LEARN_INIT, rng_for

logger = logging.getLogger(__name__)

def stiefel_project(A_raw) -> StiefelMatrix:
    """Polar projection ``(A A^T)^{-1/2} A`` onto the Stiefel manifold."""
    A_raw = np.atleast_2d(np.asarray(A_raw, dtype=float))
    p, d = A_raw.shape
    if p > d:
        raise ValueError(f"need p <= d, got {A_raw.shape}")
    sv = np.linalg.svd(A_raw, compute_uv=False)
    if sv[-1] <= 1e-10:
        raise ValueError(f"matrix is rank deficient: smallest singular value {sv[-1]:.3e}")
    evals, evecs = np.linalg.eigh(A_raw @ A_raw.T)
    evals = np.maximum(evals, 1e-12)
    return StiefelMatrix((evecs * evals ** -0.5) @ evecs.T @ A_raw)


def riemannian_grad(A, G) -> np.ndarray:
    """``G - A G^T A``, a tangent vector at ``A``."""
    A = np.asarray(A, dtype=float)
    G = np.asarray(G, dtype=float)
    if A.shape != G.shape:
        raise ValueError(f"shape mismatch: A {A.shape}, G {G.shape}")
    return G - A @ G.T @ A


def recovery_error(A_star, A_hat) -> float:
    """``||A* - A* Ahat^T Ahat||_F^2 / p*``, in [0, 1] for orthonormal rows."""
    A_star = np.atleast_2d(np.asarray(A_star, dtype=float))
    A_hat = np.atleast_2d(np.asarray(A_hat, dtype=float))
    if A_star.shape[1] != A_hat.shape[1]:
        raise ValueError(f"dimension mismatch: {A_star.shape[1]} vs {A_hat.shape[1]}")
    resid = A_star - (A_star @ A_hat.T) @ A_hat
    return float(np.sum(resid * resid) / A_star.shape[0])


@dataclass
class LossEvaluation:
    loss: float
    plan: np.ndarray
    R: np.ndarray
    grad: np.ndarray
    grad_plan: np.ndarray
    grad_reg: np.ndarray
    f: np.ndarray
    g: np.ndarray


def _weighted_scatter(W, X, Y) -> np.ndarray:
    """``sum_ij W_ij (x_i - y_j)(x_i - y_j)^T``."""
    r, c = W.sum(1), W.sum(0)
    XWY = X.T @ W @ Y
    return (X.T * r) @ X + (Y.T * c) @ Y - XWY - XWY.T


def _sqdist(X, Y):
    D = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(D, 0.0)


def _subspace_parts(X, Y, A):
    """Pairwise ``0.5 ||z||^2`` and ``tau_A(z)`` for z = x_i - y_j."""
    half_sq = 0.5 * _sqdist(X, Y)
    inside = 0.5 * _sqdist(X @ A.T, Y @ A.T)
    return half_sq, np.maximum(half_sq - inside, 0.0)


def loss_and_grad(prob: DiscreteProblem, unroll_iters: int = 200, init_g=None) -> LossEvaluation:
    """Loss and Euclidean gradient in ``A`` through unrolled Sinkhorn sweeps.

    Starts from zero potentials unless ``init_g`` is given; a warm start is
    treated as a constant by the backward pass. Returns both gradient terms:
    ``grad_plan`` flows through the plan, ``grad_reg`` through ``R``.
    """
    if prob.cost.kind != "subspace":
        raise ValueError("loss_and_grad needs a subspace cost")
    if unroll_iters < 1:
        raise ValueError("unroll_iters must be >= 1")
    X, Y, eps, gamma = prob.X, prob.Y, prob.epsilon, prob.cost.gamma
    A = prob.cost.regularizer.A.entries
    n, m = prob.shape
    half_sq, R = _subspace_parts(X, Y, A)
    C = half_sq + gamma * R

    sweeps = KernelSweeps(C, prob.a, prob.b, eps, tape=True)
    g = np.zeros(m) if init_g is None else np.asarray(init_g, dtype=float).copy()
    f = np.zeros(n)
    tape = []
    for k in range(unroll_iters):
        f, _, row = sweeps.rows(f, g)
        g, col = sweeps.cols(f, g)
        tape.append((row, col))
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise FloatingPointError(f"non-finite potentials at sweep {k + 1}")

    P = sweeps.plan(f, g)
    loss = float(np.sum(P * R))

    # Reverse pass. With Sf = diag(1/s) K diag(v) and Sg = diag(u) K diag(1/t)
    # the cotangent of C is a sum of terms diag(alpha) K diag(beta); only their
    # weighted scatter is needed, accumulated as row sums, column sums and X^T W Y.
    PR = P * R / eps
    bar_f, bar_g = PR.sum(1), PR.sum(0)
    r_acc, c_acc = np.zeros(n), np.zeros(m)
    xwy = np.zeros((X.shape[1], X.shape[1]))
    kernels = sweeps.kernels
    for (kr, v, s), (kc, u, t) in reversed(tape):
        # g_j = eps log b_j - eps lse_i((f_i - C_ij) / eps)
        K = kernels[kc]
        beta = bar_g / t
        KB = K @ np.column_stack([beta, Y * beta[:, None]])
        r_acc += u * KB[:, 0]
        c_acc += bar_g
        xwy += (X * u[:, None]).T @ KB[:, 1:]
        bar_f = bar_f - u * KB[:, 0]
        # f_i = eps log a_i - eps lse_j((g_j - C_ij) / eps)
        K = kernels[kr]
        alpha = bar_f / s
        KA = K.T @ np.column_stack([alpha, X * alpha[:, None]])
        r_acc += bar_f
        c_acc += v * KA[:, 0]
        xwy += KA[:, 1:].T @ (Y * v[:, None])
        bar_g = -v * KA[:, 0]
        bar_f = np.zeros(n)
    scatter = (X.T * r_acc) @ X + (Y.T * c_acc) @ Y - xwy - xwy.T - _weighted_scatter(PR, X, Y)

    # dC/dA and dR/dA: d(-0.5 ||A z||^2)/dA = -A z z^T
    grad_plan = -gamma * A @ scatter
    grad_reg = -A @ _weighted_scatter(P, X, Y)
    return LossEvaluation(loss, P, R, grad_plan + grad_reg, grad_plan, grad_reg, f, g)


@dataclass
class StepSchedule:
    """``eta_i = eta0 / sqrt(i + 1)``."""

    eta0: float = 0.1

    def __call__(self, i: int) -> float:
        return self.eta0 / math.sqrt(i + 1)


@dataclass
class LearnState:
    A: StiefelMatrix
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)
    eta_history: list[float] = field(default_factory=list)
    recovery_history: list[float] = field(default_factory=list)
    schedule: StepSchedule = field(default_factory=StepSchedule)
    best_A: StiefelMatrix | None = None
    best_loss: float = math.inf
    best_iteration: int = -1


def learn_subspace(X, a, Y, b, p_hat: int, gamma: float, eps: float,
                   schedule: StepSchedule | None = None, iters: int = 1000, seed: int = 0,
                   unroll_iters: int = 5, warm_start: bool = True,
                   A_star=None, A_init=None, callback=None) -> LearnState:
    """Riemannian gradient descent on ``L(A)`` over p_hat x d Stiefel matrices.

    ``A`` starts from the polar projection of a seeded Gaussian matrix. Each
    step evaluates the loss at the current ``A`` (recorded in
    ``loss_history``), then moves to ``P(A - eta_i * (G - A G^T A))``. The
    best-loss iterate is kept alongside the final one. With ``warm_start``
    every evaluation starts Sinkhorn from the previous target potential
    instead of zero. If ``A_star`` is given, recovery errors are recorded.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    d = X.shape[1]
    if not 1 <= p_hat <= d:
        raise ValueError(f"p_hat must be in [1, {d}], got {p_hat}")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    schedule = schedule or StepSchedule()
    if A_init is None:
        A = stiefel_project(rng_for(seed, STREAM_LEARN_INIT).standard_normal((p_hat, d)))
    else:
        A = A_init if isinstance(A_init, StiefelMatrix) else StiefelMatrix(A_init)
    state = LearnState(A=A, schedule=schedule, best_A=A)
    init_g = None
    for i in range(iters):
        cost = ElasticCost(gamma, Regularizer.subspace(state.A))
        prob = DiscreteProblem(X, Y, cost, eps, a, b)
        ev = loss_and_grad(prob, unroll_iters, init_g if warm_start else None)
        if not np.isfinite(ev.loss) or not np.all(np.isfinite(ev.grad)):
            raise FloatingPointError(f"non-finite loss or gradient at iteration {i}")
        init_g = ev.g
        if ev.loss < state.best_loss:
            state.best_loss, state.best_A, state.best_iteration = ev.loss, state.A, i
        eta = schedule(i)
        state.loss_history.append(ev.loss)
        state.eta_history.append(eta)
        if A_star is not None:
            state.recovery_history.append(recovery_error(A_star, state.A))
        if callback is not None:
            callback(i, state)
        Am = state.A.entries
        A_new = stiefel_project(Am - eta * riemannian_grad(Am, ev.grad))
        err = np.max(np.abs(A_new.entries @ A_new.entries.T - np.eye(p_hat)))
        assert err <= 1e-8, f"left the manifold at iteration {i}: {err:.2e}"
        state.A = A_new
        state.iteration = i + 1
    return state
