"""Dense two-phase tableau simplex with Bland's rule.

Only meant for tiny verification instances; every pivot choice is the lowest
eligible index, so results are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, NumericError

TOL = 1e-12


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    basis: list[int]
    reduced_costs: np.ndarray
    pivots: int

    @property
    def min_nonbasic_reduced_cost(self) -> float:
        """Smallest reduced cost off the basis; > 0 certifies a unique optimum."""
        mask = np.ones(self.reduced_costs.size, dtype=bool)
        mask[self.basis] = False
        return float(self.reduced_costs[mask].min()) if mask.any() else np.inf


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]


def _run(T, basis, n_cols, max_pivots):
    # T: constraint rows then objective row (reduced costs, -z in last column)
    pivots = 0
    m = T.shape[0] - 1
    while True:
        obj = T[-1, :n_cols]
        entering = next((j for j in range(n_cols) if obj[j] < -TOL), None)
        if entering is None:
            return pivots
        col = T[:m, entering]
        best, leave = np.inf, None
        for r in range(m):
            if col[r] > TOL:
                ratio = T[r, -1] / col[r]
                if ratio < best - TOL or (abs(ratio - best) <= TOL and basis[r] < basis[leave]):
                    best, leave = ratio, r
        if leave is None:
            raise NumericError("LP is unbounded")
        _pivot(T, leave, entering)
        basis[leave] = entering
        pivots += 1
        if pivots > max_pivots:
            raise NumericError("simplex exceeded its pivot budget")


def solve_standard_form(A, b, c, max_pivots: int = 10_000) -> LPResult:
    """Minimize ``c·x`` subject to ``A x = b``, ``x ≥ 0``."""
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    c = np.array(c, dtype=np.float64)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificials n..n+m-1
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, n:n + m] = 1.0
    for r in range(m):
        T[-1] -= T[r]
    basis = list(range(n, n + m))
    pivots = _run(T, basis, n + m, max_pivots)
    if -T[-1, -1] > 1e-9:
        raise InfeasibleError(f"LP infeasible (phase-1 residual {-T[-1, -1]:.3e})")

    # drive zero-level artificials out of the basis
    keep = []
    for r in range(m):
        if basis[r] >= n:
            j = next((j for j in range(n) if abs(T[r, j]) > 1e-9), None)
            if j is None:
                continue  # redundant constraint
            _pivot(T, r, j)
            basis[r] = j
            pivots += 1
        keep.append(r)
    T2 = np.zeros((len(keep) + 1, n + 1))
    T2[:-1, :n] = T[keep, :n]
    T2[:-1, -1] = T[keep, -1]
    basis = [basis[r] for r in keep]
    T2[-1, :n] = c
    for r, j in enumerate(basis):
        T2[-1] -= c[j] * T2[r]
    pivots += _run(T2, basis, n, max_pivots)

    x = np.zeros(n)
    for r, j in enumerate(basis):
        x[j] = T2[r, -1]
    x[np.abs(x) < TOL] = 0.0
    return LPResult(x=x, objective=float(c @ x), basis=basis,
                    reduced_costs=T2[-1, :n].copy(), pivots=pivots)
