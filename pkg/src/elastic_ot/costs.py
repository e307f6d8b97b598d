"""Elastic costs ``h(z) = 0.5 * ||z||^2 + gamma * tau(z)`` and their regularizers.

Three regularizers are supported:

* ``none``: ``tau = 0``, the plain squared-Euclidean cost.
* ``l1``: ``tau(z) = ||z||_1``, prox is soft-thresholding.
* ``subspace``: ``tau(z) = 0.5 * ||(I - A^T A) z||^2`` for a row-orthonormal
  ``A`` (p x d); it penalizes displacements outside the row-span of ``A``.

All functions accept a single vector of shape ``(d,)`` or a batch ``(n, d)``
and act on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

KINDS = ("none", "l1", "subspace")

_STIEFEL_EXACT = 1e-10
_STIEFEL_REPAIR = 1e-6


def _orthonormalize_rows(A: np.ndarray) -> np.ndarray:
    # (A A^T)^{-1/2} A via symmetric eigendecomposition
    evals, evecs = np.linalg.eigh(A @ A.T)
    evals = np.maximum(evals, 1e-12)
    return (evecs * evals ** -0.5) @ evecs.T @ A


@dataclass(frozen=True, eq=False)
class StiefelMatrix:
    """A p x d matrix with orthonormal rows.

    Inputs within 1e-6 (max-norm of ``A A^T - I``) of the manifold are
    re-orthonormalized; anything further away is rejected.
    """

    entries: np.ndarray

    def __post_init__(self):
        A = np.array(self.entries, dtype=float, copy=True)
        if A.ndim == 1:
            A = A[None, :]
        if A.ndim != 2 or A.size == 0:
            raise ValueError(f"Stiefel matrix must be a non-empty 2-d array, got shape {A.shape}")
        p, d = A.shape
        if p > d:
            raise ValueError(f"Stiefel matrix needs p <= d, got p={p}, d={d}")
        if not np.all(np.isfinite(A)):
            raise ValueError("Stiefel matrix has non-finite entries")
        err = np.max(np.abs(A @ A.T - np.eye(p)))
        if err > _STIEFEL_REPAIR:
            raise ValueError(f"rows are not orthonormal: max|AA^T - I| = {err:.3e}")
        if err > _STIEFEL_EXACT:
            A = _orthonormalize_rows(A)
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @property
    def complement(self) -> np.ndarray:
        """Orthogonal projector ``I - A^T A`` onto the complement of the row-span."""
        A = self.entries
        return np.eye(self.d) - A.T @ A

    @property
    def complement_basis(self) -> np.ndarray:
        """Orthonormal rows spanning the complement of the row-span, shape (d - p, d)."""
        _, _, vt = np.linalg.svd(self.entries, full_matrices=True)
        return vt[self.p:]

    def project(self, z: np.ndarray) -> np.ndarray:
        """Return ``A^T A z`` (component of z inside the row-span), batched."""
        A = self.entries
        return (z @ A.T) @ A

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    def __repr__(self) -> str:
        return f"StiefelMatrix(p={self.p}, d={self.d})"


@dataclass(frozen=True)
class Regularizer:
    """The convex penalty ``tau``; a closed enumeration over :data:`KINDS`."""

    kind: str = "none"
    A: StiefelMatrix | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == "subspace":
            if self.A is None:
                raise ValueError("subspace regularizer requires a Stiefel matrix A")
            if not isinstance(self.A, StiefelMatrix):
                object.__setattr__(self, "A", StiefelMatrix(self.A))
        elif self.A is not None:
            raise ValueError(f"regularizer {self.kind!r} takes no matrix")

    @classmethod
    def subspace(cls, A) -> "Regularizer":
        return cls("subspace", A if isinstance(A, StiefelMatrix) else StiefelMatrix(A))

    def _check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 0:
            raise ValueError("expected a vector, got a scalar")
        if self.kind == "subspace" and z.shape[-1] != self.A.d:
            raise ValueError(f"dimension mismatch: z has {z.shape[-1]} coordinates, A has d={self.A.d}")
        return z

    def value(self, z) -> np.ndarray | float:
        z = self._check(z)
        if self.kind == "none":
            out = np.zeros(z.shape[:-1])
        elif self.kind == "l1":
            out = np.abs(z).sum(-1)
        else:
            r = z - self.A.project(z)
            out = 0.5 * np.sum(r * r, -1)
        return out[()] if out.ndim == 0 else out

    def grad(self, z) -> np.ndarray:
        # l1 uses sign(0) = 0, the minimal-norm subgradient
        z = self._check(z)
        if self.kind == "none":
            return np.zeros_like(z)
        if self.kind == "l1":
            return np.sign(z)
        return z - self.A.project(z)

    def prox(self, lambda_gamma, w) -> np.ndarray:
        """``argmin_z 0.5 * ||w - z||^2 + lambda_gamma * tau(z)``.

        ``lambda_gamma`` may be an array broadcasting against ``w[..., :1]``
        (one threshold per row).
        """
        w = self._check(w)
        t = np.asarray(lambda_gamma, dtype=float)
        if np.any(t < 0):
            raise ValueError("prox parameter must be nonnegative")
        if self.kind == "none":
            return w.copy()
        if self.kind == "l1":
            return np.sign(w) * np.maximum(np.abs(w) - t, 0.0)
        # closed form on the Stiefel manifold: (I + t A^T A) w / (1 + t)
        return (w + t * self.A.project(w)) / (1.0 + t)


@dataclass(frozen=True)
class ElasticCost:
    """``h(z) = 0.5 * ||z||^2 + gamma * tau(z)``."""

    gamma: float = 0.0
    regularizer: Regularizer = field(default_factory=Regularizer)

    def __post_init__(self):
        g = float(self.gamma)
        if not np.isfinite(g) or g < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        object.__setattr__(self, "gamma", g)

    @property
    def kind(self) -> str:
        return self.regularizer.kind

    @property
    def is_quadratic(self) -> bool:
        return self.kind == "none" or self.gamma == 0.0 or self.kind == "subspace"

    def value(self, z) -> np.ndarray | float:
        z = np.asarray(z, dtype=float)
        return 0.5 * np.sum(z * z, -1) + self.gamma * self.regularizer.value(z)

    def grad(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z + self.gamma * self.regularizer.grad(z)

    def prox(self, lam, v) -> np.ndarray:
        """Proximal operator of ``lam * h``, written through the prox of tau.

        ``prox_{lam h}(v) = prox_{(lam gamma / (1 + lam)) tau}(v / (1 + lam))``.
        """
        lam = np.asarray(lam, dtype=float)
        return self.regularizer.prox(lam * self.gamma / (1.0 + lam), np.asarray(v, float) / (1.0 + lam))

    def conjugate_grad(self, w) -> np.ndarray:
        """``grad h*(w)``, the inverse of ``grad h``; equal to ``prox_{gamma tau}(w)``."""
        return self.regularizer.prox(self.gamma, w)

    def pairwise(self, X, Y, chunk: int = 256) -> np.ndarray:
        """Cost matrix ``C[i, j] = h(x_i - y_j)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if X.shape[1] != Y.shape[1]:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        sq = _sqdist(X, Y)
        if self.gamma == 0.0 or self.kind == "none":
            return 0.5 * sq
        if self.kind == "subspace":
            self.regularizer._check(X)
            B = self.regularizer.A.complement_basis
            outside = _sqdist(X @ B.T, Y @ B.T)
            return 0.5 * sq + 0.5 * self.gamma * outside
        l1 = np.empty((X.shape[0], Y.shape[0]))
        for s in range(0, X.shape[0], chunk):
            l1[s:s + chunk] = np.abs(X[s:s + chunk, None, :] - Y[None, :, :]).sum(-1)
        return 0.5 * sq + self.gamma * l1

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "gamma": self.gamma}
        if self.kind == "subspace":
            out["A"] = self.regularizer.A.entries.tolist()
        return out

    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> "ElasticCost":
        unknown = set(spec) - {"kind", "gamma", "A"}
        if unknown:
            raise ValueError(f"unknown cost keys: {sorted(unknown)}")
        kind = spec.get("kind", "none")
        A = spec.get("A")
        if kind == "subspace":
            if A is None:
                raise ValueError("subspace cost requires 'A'")
            reg = Regularizer.subspace(np.asarray(A, dtype=float))
        else:
            if A is not None:
                raise ValueError(f"cost kind {kind!r} takes no 'A'")
            reg = Regularizer(kind)
        return cls(float(spec.get("gamma", 0.0)), reg)


def _sqdist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    D = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(D, 0.0)


def tau_value(reg: Regularizer, z):
    return reg.value(z)


def tau_grad(reg: Regularizer, z):
    return reg.grad(z)


def tau_prox(reg: Regularizer, lambda_gamma, w):
    return reg.prox(lambda_gamma, w)


def cost_value(h: ElasticCost, z):
    return h.value(z)


def cost_grad(h: ElasticCost, z):
    return h.grad(z)
