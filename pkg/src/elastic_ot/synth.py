"""Seeded synthetic benchmarks with known optimal maps.

Random streams (see :mod:`elastic_ot._rng`): the potential, the train cloud,
the test cloud, the ground-truth Stiefel matrix and the calibration cloud each
use their own Philox stream derived from the benchmark seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ._rng import (STREAM_CALIBRATION, STREAM_POTENTIAL, STREAM_STIEFEL, STREAM_TEST,
                   STREAM_TRAIN, rng_for)
from .costlearn import stiefel_project
from .costs import ElasticCost, Regularizer, StiefelMatrix
from .htransform import GroundTruthMap, PGDSettings, QuadraticPotential, transport_cloud

logger = logging.getLogger(__name__)

CALIBRATION_POINTS = 256
GAMMA_START = 0.1
GAMMA_MAX = 1e6
# Output gain of the random ICNN; at gain 1 the induced displacements are too
# small relative to the clouds for subspace learning to make progress.
ICNN_OUTPUT_SCALE = 5.0


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RandomIcnn:
    """Input-convex network with softplus activations.

    ``z_1 = s(W_0 x + b_0)``, ``z_{k+1} = s(U_k z_k + W_k x + b_k)`` and
    ``out = u^T z_K + c^T x``, where the ``U_k`` and ``u`` are nonnegative.
    """

    def __init__(self, input_weights, biases, hidden_weights, out_hidden, out_linear):
        self.input_weights = [np.asarray(W, float) for W in input_weights]
        self.biases = [np.asarray(c, float) for c in biases]
        self.hidden_weights = [np.asarray(U, float) for U in hidden_weights]
        self.out_hidden = np.asarray(out_hidden, float)
        self.out_linear = np.asarray(out_linear, float)
        if any(np.any(U < 0) for U in self.hidden_weights) or np.any(self.out_hidden < 0):
            raise ValueError("hidden-to-hidden weights must be nonnegative")

    @classmethod
    def sample(cls, rng: np.random.Generator, d: int, widths=(8, 8, 8),
               output_scale: float = ICNN_OUTPUT_SCALE) -> "RandomIcnn":
        widths = list(widths)
        if not widths:
            raise ValueError("widths must be non-empty")
        Ws = [rng.standard_normal((w, d)) for w in widths]
        bs = [rng.standard_normal(w) for w in widths]
        Us = [np.abs(rng.standard_normal((w_out, w_in))) / w_in
              for w_in, w_out in zip(widths[:-1], widths[1:])]
        u = 0.5 * output_scale * np.abs(rng.standard_normal(widths[-1]))
        c = output_scale * rng.standard_normal(d) / np.sqrt(d)
        return cls(Ws, bs, Us, u, c)

    @property
    def dim(self) -> int:
        return self.input_weights[0].shape[1]

    def _forward(self, X):
        pre = [X @ self.input_weights[0].T + self.biases[0]]
        z = _softplus(pre[0])
        for U, W, c in zip(self.hidden_weights, self.input_weights[1:], self.biases[1:]):
            pre.append(z @ U.T + X @ W.T + c)
            z = _softplus(pre[-1])
        return pre, z

    def value(self, X):
        X = np.asarray(X, dtype=float)
        _, z = self._forward(np.atleast_2d(X))
        out = z @ self.out_hidden + np.atleast_2d(X) @ self.out_linear
        return out[0] if X.ndim == 1 else out

    def grad(self, X):
        X = np.asarray(X, dtype=float)
        X2 = np.atleast_2d(X)
        pre, _ = self._forward(X2)
        bar = np.broadcast_to(self.out_hidden, pre[-1].shape)
        gx = np.broadcast_to(self.out_linear, X2.shape).copy()
        for k in reversed(range(len(pre))):
            bar_pre = bar * _sigmoid(pre[k])
            gx += bar_pre @ self.input_weights[k]
            if k > 0:
                bar = bar_pre @ self.hidden_weights[k - 1]
        return gx[0] if X.ndim == 1 else gx

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_weights": [W.tolist() for W in self.input_weights],
            "biases": [c.tolist() for c in self.biases],
            "hidden_weights": [U.tolist() for U in self.hidden_weights],
            "out_hidden": self.out_hidden.tolist(),
            "out_linear": self.out_linear.tolist(),
        }


class NegIcnnPotential:
    """Concave potential ``g = -icnn``."""

    kind = "neg-icnn"
    smoothness = None

    def __init__(self, net: RandomIcnn):
        self.net = net

    @property
    def dim(self) -> int:
        return self.net.dim

    def value(self, Y):
        return -self.net.value(Y)

    def grad(self, Y):
        return -self.net.grad(Y)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.net.to_dict()}


def sample_wishart_quadratic(seed: int, d: int) -> QuadraticPotential:
    """``g(z) = -0.5 (z - w)^T M (z - w)`` with ``M = Q Q^T``, ``Q`` a d x 2d Gaussian."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = rng_for(seed, STREAM_POTENTIAL)
    Q = rng.standard_normal((d, 2 * d))
    w = rng.standard_normal(d)
    return QuadraticPotential(Q @ Q.T, w)


def sample_icnn_potential(seed: int, d: int, widths=(8, 8, 8)) -> NegIcnnPotential:
    return NegIcnnPotential(RandomIcnn.sample(rng_for(seed, STREAM_POTENTIAL), d, widths))


def sample_stiefel(seed: int, p: int, d: int) -> StiefelMatrix:
    if not 1 <= p <= d:
        raise ValueError(f"need 1 <= p <= d, got p={p}, d={d}")
    return stiefel_project(rng_for(seed, STREAM_STIEFEL).standard_normal((p, d)))


def sv_ratio(D, p: int) -> float:
    """Share of the singular-value mass of ``D`` carried by its top ``p`` values."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if not 1 <= p <= min(D.shape):
        raise ValueError(f"p must be in [1, {min(D.shape)}], got {p}")
    s = np.linalg.svd(D, compute_uv=False)
    total = s.sum()
    if total == 0.0:
        return 1.0
    return float(min(s[:p].sum() / total, 1.0))


@dataclass(frozen=True)
class GenerationSpec:
    """Everything needed to regenerate a benchmark bit-for-bit.

    ``potential`` is one of ``quadratic``, ``icnn`` or ``zero``. For a
    ``subspace`` cost the ground-truth matrix is drawn with ``p_star`` rows
    unless ``A`` is given. When ``sv_target`` is set, ``gamma`` is replaced by
    the calibrated value.
    """

    seed: int = 0
    d: int = 5
    n: int = 1024
    n_test: int | None = None
    potential: str = "quadratic"
    icnn_widths: tuple[int, ...] = (8, 8, 8)
    cost_kind: str = "l1"
    gamma: float = 1.0
    p_star: int = 1
    A: tuple | None = None
    sv_target: float | None = None
    pgd: PGDSettings = field(default_factory=PGDSettings)

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be >= 1")
        if self.potential not in ("quadratic", "icnn", "zero"):
            raise ValueError(f"unknown potential {self.potential!r}")
        if self.cost_kind not in ("none", "l1", "subspace"):
            raise ValueError(f"unknown cost kind {self.cost_kind!r}")
        if self.sv_target is not None:
            if self.cost_kind != "subspace":
                raise ValueError("sv_target needs a subspace cost")
            if not 0 < self.sv_target < 1:
                raise ValueError("sv_target must be in (0, 1)")
        if self.cost_kind == "subspace" and not 1 <= self.p_star <= self.d:
            raise ValueError("p_star must be in [1, d]")

    def make_potential(self):
        if self.potential == "quadratic":
            return sample_wishart_quadratic(self.seed, self.d)
        if self.potential == "icnn":
            return sample_icnn_potential(self.seed, self.d, self.icnn_widths)
        return QuadraticPotential.zero(self.d)

    def make_A(self) -> StiefelMatrix | None:
        if self.cost_kind != "subspace":
            return None
        if self.A is not None:
            return StiefelMatrix(np.asarray(self.A, dtype=float))
        return sample_stiefel(self.seed, self.p_star, self.d)

    def make_cost(self, gamma: float | None = None) -> ElasticCost:
        gamma = self.gamma if gamma is None else gamma
        if self.cost_kind == "subspace":
            return ElasticCost(gamma, Regularizer.subspace(self.make_A()))
        return ElasticCost(gamma, Regularizer(self.cost_kind))


def calibrate_gamma(spec: GenerationSpec, target: float, potential=None) -> float:
    """Smallest-found ``gamma`` whose displacements reach ``sv-ratio >= target``.

    Doubles ``gamma`` from 0.1 on a 256-point calibration cloud, then runs 8
    bisection steps between the last failing and first passing values.
    """
    if spec.cost_kind != "subspace":
        raise ValueError("gamma calibration needs a subspace cost")
    if not 0 < target < 1:
        raise ValueError("target must be in (0, 1)")
    g = potential if potential is not None else spec.make_potential()
    Xc = rng_for(spec.seed, STREAM_CALIBRATION).standard_normal((CALIBRATION_POINTS, spec.d))
    p = min(spec.p_star, spec.d, CALIBRATION_POINTS)

    def ratio(gamma):
        Y = transport_cloud(GroundTruthMap(spec.make_cost(gamma), g, spec.pgd), Xc)
        return sv_ratio(Y - Xc, p)

    lo, hi = None, GAMMA_START
    best = ratio(hi)
    while best < target:
        lo, hi = hi, 2.0 * hi
        if hi > GAMMA_MAX:
            raise RuntimeError(f"sv-ratio target {target} unreachable for gamma <= {GAMMA_MAX:g}; "
                               f"best ratio {best:.4f}")
        r = ratio(hi)
        logger.debug("calibrate: gamma=%g ratio=%.4f", hi, r)
        best = max(best, r)
        if r >= target:
            break
    if lo is None:
        # the potential alone is anisotropic enough; the cost barely shapes the displacements
        logger.warning("calibrate: sv-ratio %.4f already meets target %g at the starting gamma %g",
                       best, target, hi)
        return hi
    for _ in range(8):
        mid = 0.5 * (lo + hi)
        if ratio(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class Benchmark:
    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray
    metadata: dict[str, Any]


def generate_benchmark(spec: GenerationSpec) -> Benchmark:
    """Gaussian train/test clouds and their images under the ground-truth map."""
    g = spec.make_potential()
    gamma = spec.gamma
    if spec.sv_target is not None:
        gamma = calibrate_gamma(spec, spec.sv_target, potential=g)
    cost = spec.make_cost(gamma)
    gt = GroundTruthMap(cost, g, spec.pgd)
    n_test = spec.n if spec.n_test is None else spec.n_test
    X_train = rng_for(spec.seed, STREAM_TRAIN).standard_normal((spec.n, spec.d))
    X_test = rng_for(spec.seed, STREAM_TEST).standard_normal((n_test, spec.d))
    Y_train, info_train = transport_cloud(gt, X_train, return_info=True)
    Y_test, info_test = transport_cloud(gt, X_test, return_info=True)
    metadata = {
        "seed": spec.seed,
        "d": spec.d,
        "n": spec.n,
        "n_test": n_test,
        "cost": cost.to_dict(),
        "gamma": gamma,
        "calibrated": spec.sv_target is not None,
        "sv_target": spec.sv_target,
        "p_star": spec.p_star if spec.cost_kind == "subspace" else None,
        "potential": g.to_dict(),
        "pgd": {"tol": spec.pgd.tol, "max_iters": spec.pgd.max_iters},
        "converged_train": info_train.converged.tolist(),
        "converged_test": info_test.converged.tolist(),
        "all_converged": bool(info_train.converged.all() and info_test.converged.all()),
    }
    if spec.cost_kind == "subspace":
        metadata["sv_ratio_train"] = sv_ratio(Y_train - X_train, min(spec.p_star, spec.n))
    return Benchmark(X_train, Y_train, X_test, Y_test, metadata)
