"""Entropic OT between weighted point clouds, in the log domain.

Potentials follow the dual

    max_{f, g}  <f, a> + <g, b> - eps * <exp(f / eps), K exp(g / eps)>,
    K_ij = exp(-h(x_i - y_j) / eps),

so the plan is ``P_ij = exp((f_i + g_j - C_ij) / eps)`` without explicit
``a_i b_j`` factors. The out-of-sample potential ``softmin_eps(h(x - y_j) - g_j)``
and the conditional probabilities derived from it therefore use no weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .costs import ElasticCost

logger = logging.getLogger(__name__)


def _lse(M: np.ndarray, axis: int) -> np.ndarray:
    mx = M.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    out = np.log(np.exp(M - mx).sum(axis=axis, keepdims=True)) + mx
    return np.squeeze(out, axis=axis)


_EXP_CUT = -300.0


def exp_flushed(Z: np.ndarray) -> np.ndarray:
    """``exp(Z)`` with entries below ``exp(-300)`` set to zero.

    Denormal kernel entries make BLAS products and ``exp`` itself several
    times slower; the dropped mass is negligible against any row sum that
    matters.
    """
    out = np.maximum(Z, _EXP_CUT)
    mask = out == _EXP_CUT
    np.exp(out, out=out)
    out[mask] = 0.0
    return out


def softmin(u, eps: float):
    """``-eps * log(sum(exp(-u / eps)))`` along the last axis."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] == 0:
        raise ValueError("softmin needs a non-empty vector")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    out = -eps * _lse(-u / eps, axis=-1)
    return out[()] if np.ndim(out) == 0 else out


def softmin_grad(u, eps: float) -> np.ndarray:
    """Gradient of :func:`softmin`: a probability vector along the last axis."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] == 0:
        raise ValueError("softmin needs a non-empty vector")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    M = -u / eps
    E = np.exp(M - M.max(axis=-1, keepdims=True))
    return E / E.sum(axis=-1, keepdims=True)


def _simplex(w, n: int, name: str) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"{name} has {w.shape[0]} entries for {n} points")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be nonnegative and finite")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"{name} must sum to 1 (got {w.sum():.15g})")
    return w


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    """Two weighted clouds, an elastic cost and an absolute regularization ``epsilon``.

    Weights default to uniform. Use :meth:`with_relative_epsilon` to scale
    ``epsilon`` by the mean entry of the cost matrix.
    """

    X: np.ndarray
    Y: np.ndarray
    cost: ElasticCost = field(default_factory=ElasticCost)
    epsilon: float = 1.0
    a: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if X.shape[0] < 1 or Y.shape[0] < 1:
            raise ValueError("both clouds need at least one point")
        if X.shape[1] != Y.shape[1]:
            raise ValueError(f"dimension mismatch: X has d={X.shape[1]}, Y has d={Y.shape[1]}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "a", _simplex(self.a, X.shape[0], "a"))
        object.__setattr__(self, "b", _simplex(self.b, Y.shape[0], "b"))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @classmethod
    def with_relative_epsilon(cls, X, Y, cost: ElasticCost, eps_rel: float, a=None, b=None):
        C = cost.pairwise(X, Y)
        eps = eps_rel * float(np.mean(C))
        if not eps > 0:
            raise ValueError("relative epsilon needs a cost matrix with positive mean")
        prob = cls(X, Y, cost, eps, a, b)
        prob.__dict__["C"] = C
        return prob

    @cached_property
    def C(self) -> np.ndarray:
        C = self.cost.pairwise(self.X, self.Y)
        if not np.all(np.isfinite(C)):
            raise ValueError("cost matrix has non-finite entries")
        return C

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[0], self.Y.shape[0]


@dataclass
class SinkhornSettings:
    tol: float = 1e-6
    max_iters: int = 5000
    debug: bool = False


@dataclass
class DualSolution:
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    iterations: int
    marginal_error: float
    converged: bool
    objective_history: list[float] = field(default_factory=list, repr=False)


@dataclass
class TransportPlan:
    P: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.P)) or np.any(self.P < 0):
            raise ValueError("transport plan entries must be finite and nonnegative")


def dual_objective(prob: DiscreteProblem, f, g) -> float:
    """Value of the entropic dual at ``(f, g)``."""
    eps = prob.epsilon
    P = exp_flushed((f[:, None] + g[None, :] - prob.C) / eps)
    return float(f @ prob.a + g @ prob.b - eps * P.sum())


class KernelSweeps:
    """Log-domain Sinkhorn half-steps evaluated through a cached kernel.

    The kernel ``K = exp((f0_i + g0_j - C_ij) / eps)`` is stored for reference
    potentials ``(f0, g0)``, so that

        lse_j((g_j - C_ij) / eps) = log (K v)_i - f0_i / eps,
        v = exp((g - g0) / eps),

    and symmetrically for columns. The kernel is recomputed at the current
    potentials whenever ``|g - g0| / eps`` (or ``|f - f0| / eps``) exceeds
    ``threshold`` or a row/column sum falls below 1e-100; the recomputation is a
    max-shifted log-sum-exp. With ``tape=True`` every half-step is recorded
    as ``(kernel, scaling, sums)`` for reverse-mode differentiation.
    """

    def __init__(self, C, a, b, eps, threshold: float = 25.0, tape: bool = False):
        self.C, self.eps = C, eps
        self.a, self.b = a, b
        self.log_a, self.log_b = np.log(a), np.log(b)
        self.threshold = threshold
        self.K = None
        self.f0 = self.g0 = None
        self.tape = tape
        self.kernels: list[np.ndarray] = []
        self.row_records: list[tuple] = []
        self.col_records: list[tuple] = []
        self.absorptions = 0

    def _set_kernel(self, K, f0, g0):
        self.K, self.f0, self.g0 = K, f0.copy(), g0.copy()
        self.absorptions += 1
        if self.tape:
            self.kernels.append(K)

    def _kid(self):
        return len(self.kernels) - 1 if self.tape else -1

    def rows(self, f, g):
        """New ``f`` given ``g``, and the max row-marginal error of the plan at ``(f, g)``."""
        eps = self.eps
        s = None
        if self.K is not None:
            dv = (g - self.g0) / eps
            if np.max(np.abs(dv)) <= self.threshold:
                v = np.exp(dv)
                s = self.K @ v
                if not (np.all(np.isfinite(s)) and s.min() > 1e-100):
                    s = None
        if s is None:
            M = (g[None, :] - self.C) / eps
            mx = M.max(1)
            E = exp_flushed(M - mx[:, None])
            se = E.sum(1)
            lse = np.log(se) + mx
            f_new = eps * (self.log_a - lse)
            err = np.max(np.abs(np.exp(np.minimum(f / eps + lse, 700.0)) - self.a))
            self._set_kernel(E * (self.a / se)[:, None], f_new, g)
            v = np.ones_like(g)
            s = self.K.sum(1)
        else:
            err = np.max(np.abs(np.exp(np.minimum((f - self.f0) / eps, 700.0)) * s - self.a))
            f_new = self.f0 + eps * (self.log_a - np.log(s))
        rec = (self._kid(), v, s)
        return f_new, float(err), rec

    def cols(self, f, g):
        """New ``g`` given ``f``."""
        eps = self.eps
        t = None
        if self.K is not None:
            du = (f - self.f0) / eps
            if np.max(np.abs(du)) <= self.threshold:
                u = np.exp(du)
                t = self.K.T @ u
                if not (np.all(np.isfinite(t)) and t.min() > 1e-100):
                    t = None
        if t is None:
            M = (f[:, None] - self.C) / eps
            mx = M.max(0)
            E = exp_flushed(M - mx[None, :])
            te = E.sum(0)
            g_new = eps * (self.log_b - np.log(te) - mx)
            self._set_kernel(E * (self.b / te)[None, :], f, g_new)
            u = np.ones_like(f)
            t = self.K.sum(0)
        else:
            g_new = self.g0 + eps * (self.log_b - np.log(t))
        rec = (self._kid(), u, t)
        return g_new, rec

    def plan(self, f, g) -> np.ndarray:
        """``exp((f_i + g_j - C_ij) / eps)``, rescaling the cached kernel when possible."""
        if self.K is not None:
            du, dv = (f - self.f0) / self.eps, (g - self.g0) / self.eps
            if max(np.max(np.abs(du)), np.max(np.abs(dv))) <= self.threshold:
                return self.K * np.exp(du)[:, None] * np.exp(dv)[None, :]
        return exp_flushed((f[:, None] + g[None, :] - self.C) / self.eps)


def solve_duals(prob: DiscreteProblem, settings: SinkhornSettings | None = None,
                init: tuple[np.ndarray, np.ndarray] | None = None) -> DualSolution:
    """Alternating log-domain Sinkhorn updates.

    Stops once the largest absolute deviation of the plan's marginals from
    ``(a, b)`` is at most ``settings.tol``. Column marginals are exact after
    each ``g`` update, so only the row marginal is monitored. On return the
    gauge is fixed so that ``<f, a> = <g, b>``.
    """
    settings = settings or SinkhornSettings()
    eps = prob.epsilon
    sweeps = KernelSweeps(prob.C, prob.a, prob.b, eps)
    if init is None:
        f, g = np.zeros(prob.shape[0]), np.zeros(prob.shape[1])
    else:
        f, g = (np.array(v, dtype=float) for v in init)
    history: list[float] = []
    err = np.inf
    it = 0
    while True:
        f_new, row_err, _ = sweeps.rows(f, g)
        if it > 0:
            err = row_err
            if not np.isfinite(err):
                raise FloatingPointError(f"non-finite marginal error at sweep {it}")
            if err <= settings.tol or it >= settings.max_iters:
                break
        f = f_new
        g, _ = sweeps.cols(f, g)
        it += 1
        if settings.debug:
            history.append(dual_objective(prob, f, g))
            if len(history) > 1:
                assert history[-1] >= history[-2] - 1e-10 * (1 + abs(history[-2])), (
                    f"dual objective decreased at sweep {it}")
    converged = err <= settings.tol
    if not converged:
        logger.warning("sinkhorn: marginal error %.3e after %d sweeps", err, it)
    shift = 0.5 * (f @ prob.a - g @ prob.b)
    return DualSolution(f - shift, g + shift, eps, it, err, converged, history)


def primal_plan(prob: DiscreteProblem, duals: DualSolution) -> TransportPlan:
    f, g = duals.f, duals.g
    if f.shape[0] != prob.shape[0] or g.shape[0] != prob.shape[1]:
        raise ValueError("dual potentials do not match the problem shape")
    return TransportPlan(exp_flushed((f[:, None] + g[None, :] - prob.C) / prob.epsilon))


def _target_costs(prob: DiscreteProblem, duals: DualSolution, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Xq = np.atleast_2d(x)
    if Xq.shape[1] != prob.X.shape[1]:
        raise ValueError(f"query has d={Xq.shape[1]}, problem has d={prob.X.shape[1]}")
    if duals.g.shape[0] != prob.shape[1]:
        raise ValueError("dual potentials do not match the problem shape")
    return prob.cost.pairwise(Xq, prob.Y) - duals.g[None, :], single


def entropic_potential_value(prob: DiscreteProblem, duals: DualSolution, x):
    """Out-of-sample potential ``softmin_eps([h(x - y_j) - g_j]_j)``."""
    U, single = _target_costs(prob, duals, x)
    out = softmin(U, prob.epsilon)
    return float(out[0]) if single else out


def conditional_probs(prob: DiscreteProblem, duals: DualSolution, x) -> np.ndarray:
    """Probability vector(s) over targets: gradient of the softmin above."""
    U, single = _target_costs(prob, duals, x)
    p = softmin_grad(U, prob.epsilon)
    return p[0] if single else p


def mbo_map(prob: DiscreteProblem, duals: DualSolution, x, chunk: int = 128) -> np.ndarray:
    """Entropic map estimator for an elastic cost.

    ``T(x) = x - prox_{gamma tau}(x + sum_j p_j(x) (gamma grad tau(x - y_j) - y_j))``.
    Accepts a single point or an (k, d) batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Xq = np.atleast_2d(x)
    cost, Y = prob.cost, prob.Y
    out = np.empty_like(Xq)
    for s in range(0, Xq.shape[0], chunk):
        Xc = Xq[s:s + chunk]
        P = conditional_probs(prob, duals, Xc)
        bary = P @ Y
        if cost.gamma == 0.0 or cost.kind == "none":
            out[s:s + chunk] = bary
            continue
        reg = cost.regularizer
        if reg.kind == "subspace":
            # grad tau is linear, so the weighted sum collapses
            avg_grad = reg.grad(Xc - bary)
        else:
            avg_grad = np.einsum("kj,kjd->kd", P, reg.grad(Xc[:, None, :] - Y[None, :, :]))
        V = Xc - bary + cost.gamma * avg_grad
        out[s:s + chunk] = Xc - cost.conjugate_grad(V)
    return out[0] if single else out


def entropic_ot(X, a, Y, b, eps: float, cost: ElasticCost | None = None,
                settings: SinkhornSettings | None = None) -> float:
    """Entropic OT value ``<P, C> + eps * KL(P | a b^T)`` at the optimum.

    Computed from the (stationary) dual value, which is the most accurate
    quantity available after an approximate solve.
    """
    prob = DiscreteProblem(X, Y, cost or ElasticCost(), eps, a, b)
    return _dual_value(prob, solve_duals(prob, settings))


def self_potential(X, a, eps: float, settings: SinkhornSettings | None = None) -> DualSolution:
    """Symmetric dual ``f = g`` for transporting ``(X, a)`` onto itself.

    Uses the averaged update ``f <- (f + T(f)) / 2``, which converges far
    faster than alternating sweeps on a self-transport problem.
    """
    settings = settings or SinkhornSettings()
    prob = DiscreteProblem(X, X, ElasticCost(), eps, a, a)
    C, log_a = prob.C, np.log(prob.a)
    f = np.zeros(prob.shape[0])
    err = np.inf
    it = 0
    while True:
        T = eps * (log_a - _lse((f[None, :] - C) / eps, axis=1))
        # row sums of the plan at f are a * exp((f - T) / eps)
        err = float(np.max(np.abs(prob.a * np.expm1((f - T) / eps))))
        if not np.isfinite(err):
            raise FloatingPointError(f"non-finite marginal error at iteration {it}")
        if err <= settings.tol or it >= settings.max_iters:
            break
        f = 0.5 * (f + T)
        it += 1
    converged = err <= settings.tol
    if not converged:
        logger.warning("symmetric sinkhorn: marginal error %.3e after %d updates", err, it)
    return DualSolution(f, f.copy(), eps, it, err, converged)


def _dual_value(prob: DiscreteProblem, duals: DualSolution) -> float:
    eps = prob.epsilon
    P = primal_plan(prob, duals).P
    # dual value under the a b^T reference, mass term included
    fa = duals.f - eps * np.log(prob.a)
    gb = duals.g - eps * np.log(prob.b)
    return float(fa @ prob.a + gb @ prob.b - eps * (P.sum() - 1.0))


def sinkhorn_divergence(X, a, Y, b, eps: float, settings: SinkhornSettings | None = None) -> float:
    """Debiased ``OT(mu, nu) - OT(mu, mu) / 2 - OT(nu, nu) / 2`` for the 0.5 * l2^2 cost.

    The self terms use :func:`self_potential`.
    """
    settings = settings or SinkhornSettings(tol=1e-9, max_iters=100_000)
    xy = entropic_ot(X, a, Y, b, eps, settings=settings)
    terms = []
    for Z, w in ((X, a), (Y, b)):
        prob = DiscreteProblem(Z, Z, ElasticCost(), eps, w, w)
        terms.append(_dual_value(prob, self_potential(Z, w, eps, settings)))
    return xy - 0.5 * (terms[0] + terms[1])
