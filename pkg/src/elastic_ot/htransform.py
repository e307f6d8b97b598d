"""h-transforms of concave potentials and the ground-truth maps they induce.

For a concave, smooth ``g`` the h-transform ``inf_y h(x - y) - g(y)`` is solved
by proximal gradient descent on the displacement ``u = y - x``: the smooth part
is ``-g(x + u)`` and the nonsmooth part is ``h(u)`` (h is symmetric), whose prox
reduces to a prox of ``tau``. The minimizer ``y*(x)`` is the image of ``x`` under
the optimal map for cost ``h`` between any ``mu`` and its push-forward.

Everything here is vectorized over rows; a single point is a batch of one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import ElasticCost

logger = logging.getLogger(__name__)


class QuadraticPotential:
    """Concave quadratic ``g(z) = -0.5 (z - w)^T M (z - w)`` with ``M`` PSD."""

    kind = "quadratic"

    def __init__(self, M, w):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        w = np.asarray(w, dtype=float).reshape(-1)
        d = w.shape[0]
        if M.shape != (d, d):
            raise ValueError(f"M must be {d}x{d}, got {M.shape}")
        if not np.allclose(M, M.T, atol=1e-12, rtol=0):
            raise ValueError("M must be symmetric")
        try:
            np.linalg.cholesky(M + 1e-12 * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise ValueError("M must be positive semidefinite for g to be concave") from exc
        self.M = 0.5 * (M + M.T)
        self.w = w
        self.smoothness = float(np.linalg.eigvalsh(self.M)[-1]) if d else 0.0

    @classmethod
    def zero(cls, d: int) -> "QuadraticPotential":
        return cls(np.zeros((d, d)), np.zeros(d))

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def value(self, Y):
        D = np.asarray(Y, dtype=float) - self.w
        return -0.5 * np.einsum("...i,ij,...j->...", D, self.M, D)

    def grad(self, Y):
        return -(np.asarray(Y, dtype=float) - self.w) @ self.M

    def to_dict(self) -> dict:
        return {"kind": self.kind, "M": self.M.tolist(), "w": self.w.tolist()}


@dataclass
class PGDSettings:
    """Solver settings for the h-transform descent.

    ``step`` is the initial step; it is halved until the sufficient-decrease
    condition holds and then carried over to the next iteration.
    """

    tol: float = 1e-8
    max_iters: int = 10_000
    step: float = 1.0
    min_step: float = 1e-14
    debug: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.step > 0:
            raise ValueError("step must be > 0")


@dataclass
class HTransformResult:
    y_star: np.ndarray
    value: float
    gradient: np.ndarray
    iterations: int
    step_change: float
    converged: bool


@dataclass
class BatchHTransform:
    """Row-wise results of :func:`h_transform_batch`."""

    y_star: np.ndarray
    value: np.ndarray
    gradient: np.ndarray
    iterations: np.ndarray
    step_change: np.ndarray
    converged: np.ndarray

    def row(self, i: int) -> HTransformResult:
        return HTransformResult(
            self.y_star[i].copy(), float(self.value[i]), self.gradient[i].copy(),
            int(self.iterations[i]), float(self.step_change[i]), bool(self.converged[i]),
        )


def _objective(cost, g, X, Y):
    return cost.value(X - Y) - g.value(Y)


def h_transform_batch(cost: ElasticCost, g, X, settings: PGDSettings | None = None) -> BatchHTransform:
    """Solve ``inf_y h(x - y) - g(y)`` for every row ``x`` of ``X``."""
    settings = settings or PGDSettings()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if g.dim != d:
        raise ValueError(f"potential has dimension {g.dim}, points have {d}")
    Y = X.copy()
    lam = np.full(n, float(settings.step))
    iters = np.zeros(n, dtype=int)
    change = np.full(n, np.inf)
    active = np.arange(n)
    obj = _objective(cost, g, X, Y) if settings.debug else None

    for t in range(settings.max_iters):
        if active.size == 0:
            break
        Xa, Ya = X[active], Y[active]
        Ua = Ya - Xa
        grad = g.grad(Ya)
        smooth = -g.value(Ya)
        lam_a = lam[active]
        U_new = np.empty_like(Ua)
        todo = np.arange(active.size)
        while todo.size:
            lt = lam_a[todo][:, None]
            cand = cost.prox(lt, Ua[todo] + lt * grad[todo])
            step = cand - Ua[todo]
            # sufficient decrease for the smooth part -g(x + u)
            bound = (smooth[todo] - np.sum(grad[todo] * step, 1)
                     + np.sum(step * step, 1) / (2.0 * lt[:, 0]))
            new_smooth = -g.value(Xa[todo] + cand)
            slack = 1e-12 * (1.0 + np.abs(smooth[todo]))
            ok = (new_smooth <= bound + slack) | (lt[:, 0] <= settings.min_step)
            U_new[todo[ok]] = cand[ok]
            todo = todo[~ok]
            lam_a[todo] *= 0.5
        lam[active] = lam_a
        Y_new = Xa + U_new
        if not np.all(np.isfinite(Y_new)):
            bad = active[~np.all(np.isfinite(Y_new), 1)]
            raise FloatingPointError(f"non-finite iterate at iteration {t + 1} (rows {bad[:5].tolist()})")
        delta = np.max(np.abs(Y_new - Ya), 1)
        Y[active] = Y_new
        iters[active] += 1
        change[active] = delta
        if settings.debug:
            new_obj = _objective(cost, g, Xa, Y_new)
            assert np.all(new_obj <= obj[active] + 1e-10 * (1.0 + np.abs(obj[active]))), (
                f"objective increased at iteration {t + 1}")
            obj[active] = new_obj
        active = active[delta > settings.tol]

    converged = change <= settings.tol
    if not np.all(converged):
        logger.warning("h-transform: %d of %d rows did not converge in %d iterations",
                       int((~converged).sum()), n, settings.max_iters)
    Z = X - Y
    return BatchHTransform(Y, _objective(cost, g, X, Y), cost.grad(Z), iters, change, converged)


def h_transform(cost: ElasticCost, g, x, settings: PGDSettings | None = None) -> HTransformResult:
    """h-transform at a single point, see :func:`h_transform_batch`."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a vector")
    return h_transform_batch(cost, g, x[None, :], settings).row(0)


@dataclass
class GroundTruthMap:
    """The optimal map ``x -> y*(x)`` for cost ``h`` induced by a concave potential."""

    cost: ElasticCost
    potential: object
    settings: PGDSettings = field(default_factory=PGDSettings)

    def solve(self, X) -> BatchHTransform:
        return h_transform_batch(self.cost, self.potential, X, self.settings)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return transport_point(self, X)
        return transport_cloud(self, X)


def transport_point(map: GroundTruthMap, x) -> np.ndarray:
    # x - grad h*(grad g^h(x)) collapses to y*(x) since grad h* inverts grad h
    return h_transform(map.cost, map.potential, x, map.settings).y_star


def transport_cloud(map: GroundTruthMap, X, return_info: bool = False):
    """Transport every row of ``X``; order-preserving.

    With ``return_info`` the full :class:`BatchHTransform` is returned as well,
    so callers can inspect per-row convergence flags.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be an (n, d) array")
    try:
        res = map.solve(X)
    except FloatingPointError:
        # locate the first failing row for the diagnostic
        for i in range(X.shape[0]):
            try:
                map.solve(X[i:i + 1])
            except FloatingPointError as exc:
                raise FloatingPointError(f"row {i}: {exc}") from exc
        raise
    return (res.y_star, res) if return_info else res.y_star
