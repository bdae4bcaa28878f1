"""Pairwise ground costs and the PSD projection of the interaction matrix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _kernels
from . import tensor_core as tc
from .errors import ContractError, DimensionError, NonPSDError, NumericError

PSD_TOL = 1e-10

MetricKind = Literal["euclidean", "sqeuclidean", "mahalanobis"]


@dataclass
class GroundMetric:
    """Cost-matrix factory.  ``M`` may be an array or a tape ``Var``."""

    kind: MetricKind = "euclidean"
    M: object = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "sqeuclidean", "mahalanobis"):
            raise ContractError(f"unknown metric kind {self.kind!r}")
        if self.kind == "mahalanobis":
            if self.M is None:
                raise ContractError("mahalanobis metric needs M")
            m = tc.value_of(self.M)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DimensionError(f"M must be square, got {m.shape}")

    @classmethod
    def mahalanobis(cls, M) -> "GroundMetric":
        return cls("mahalanobis", M)

    @classmethod
    def identity(cls, d: int) -> "GroundMetric":
        """Mahalanobis metric at its warm start, M = I."""
        return cls("mahalanobis", np.eye(d))

    def __call__(self, A, B):
        return pairwise_cost(A, B, self)


def _quadratic_form(diff, M):
    # diff: (..., d); returns diffᵀ M diff over the last axis
    return tc.sum(tc.mul(tc.matmul(diff, M), diff), axis=-1)


def _guarded_root(q):
    qv = np.asarray(tc.value_of(q))
    if np.any(qv < -PSD_TOL):
        raise NonPSDError(f"quadratic form {qv.min():.3e} < -{PSD_TOL}; M is not PSD")
    return tc.sqrt(tc.maximum(q, 0.0))


def pairwise_cost(A, B, metric: GroundMetric):
    """Cost matrix ``C[i, j] = dist(A[i], B[j])`` (differentiable in A, B, M)."""
    sa, sb = tc.value_of(A).shape, tc.value_of(B).shape
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[1]:
        raise DimensionError(f"embeddings must be n×d and m×d with equal d, got {sa} and {sb}")
    n, d = sa
    m = sb[0]
    diff = tc.sub(tc.reshape(A, (n, 1, d)), tc.reshape(B, (1, m, d)))
    if metric.kind == "mahalanobis":
        if tc.value_of(metric.M).shape != (d, d):
            raise DimensionError(f"M has shape {tc.value_of(metric.M).shape}, embeddings have d={d}")
        return _guarded_root(_quadratic_form(diff, metric.M))
    sq = tc.sum(tc.mul(diff, diff), axis=-1)
    if metric.kind == "sqeuclidean":
        return sq
    return tc.sqrt(sq)


def mahalanobis_distance(x, y, M) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if x.shape != y.shape or M.shape != (x.size, x.size):
        raise DimensionError(f"shapes {x.shape}, {y.shape}, {M.shape} do not conform")
    diff = x - y
    return float(_guarded_root(diff @ M @ diff))


def jacobi_eigh(S: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, V)`` with ``S ≈ V diag(w) Vᵀ``; eigenvalues ascending.
    """
    A = np.array(S, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got {A.shape}")
    V = np.eye(A.shape[0])
    if _kernels.jacobi_sweeps(A, V, tol, max_sweeps) < 0:
        raise NumericError("Jacobi eigensolver did not converge")
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def project_psd(M) -> np.ndarray:
    """Nearest symmetric PSD matrix: symmetrize, clamp negative eigenvalues."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"M must be square, got {M.shape}")
    S = 0.5 * (M + M.T)
    w, V = jacobi_eigh(S)
    P = (V * np.maximum(w, 0.0)) @ V.T
    return 0.5 * (P + P.T)


def min_eigenvalue(M) -> float:
    return float(jacobi_eigh(0.5 * (np.asarray(M) + np.asarray(M).T))[0][0])
