"""Entropic balanced and partial optimal transport, plus an exact LP oracle.

Both entropic solvers work on log-domain potentials: the plan is always
``exp(-C/eps + u_i + v_j)``, so every entry stays strictly positive and
nothing underflows at small ``eps``.

Partial OT minimises ``<pi, C> + eps * sum(pi * log pi)`` over plans with
``pi 1 <= p``, ``pi^T 1 <= q`` and ``sum(pi) = s``, by cyclic Bregman (KL)
projections onto the three sets with Dykstra corrections on the two
inequality sets.  A second route, balanced Sinkhorn on a problem augmented
with an absorbing dummy row and column, is kept as a cross-check.

When the cost matrix is a tape ``Var`` the solve is recorded as a single tape
node whose backward pass replays the last ``backward_cap`` iterations in
reverse (truncated unrolling; exact when the solve converged within the cap).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ContractError, DimensionError, InfeasibleError
from . import _kernels
from .simplex import solve_standard_form

EXACT_LIMIT = 6


@dataclass
class SolverConfig:
    epsilon: float = 0.05
    mass: float | None = None  # None -> mass_fraction * min(sum p, sum q)
    mass_fraction: float = 0.9
    max_iterations: int = 10_000
    tolerance: float = 1e-9
    backward_cap: int = 200
    differentiate: bool = True  # False: plans are treated as constants

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError("epsilon must be > 0")
        if self.max_iterations < 1 or self.backward_cap < 1:
            raise ContractError("max_iterations and backward_cap must be positive")
        if not self.tolerance > 0:
            raise ContractError("tolerance must be > 0")
        if not 0.0 <= self.mass_fraction <= 1.0:
            raise ContractError("mass_fraction must lie in [0, 1]")

    def resolve_mass(self, p, q) -> float:
        cap = min(float(np.sum(p)), float(np.sum(q)))
        s = self.mass_fraction * cap if self.mass is None else float(self.mass)
        if s < 0:
            raise ContractError(f"mass {s} is negative")
        if s > cap * (1 + 1e-12) + 1e-15:
            raise InfeasibleError(f"mass {s} exceeds min(sum p, sum q) = {cap}")
        return min(s, cap)


@dataclass
class TransportPlan:
    plan: np.ndarray
    achieved_mass: float
    iterations_used: int
    converged: bool
    info: dict = field(default_factory=dict)
    # tape handle of the plan when solved on a tape
    var: object = None

    @property
    def value(self):
        """The plan as something tensor ops accept (Var when taped)."""
        return self.var if self.var is not None else self.plan

    def cost(self, C) -> float:
        return float(np.sum(self.plan * np.asarray(tc.value_of(C))))


def _safe_log(x):
    return np.log(np.maximum(np.asarray(x, dtype=np.float64), tc.LOG_FLOOR))


def _check_inputs(C, p, q):
    C = np.asarray(tc.value_of(C), dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if C.ndim != 2 or C.shape != (p.size, q.size):
        raise DimensionError(f"cost {C.shape} does not match marginals {p.size}, {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise ContractError("marginals must be nonnegative")
    return C, p, q


def _run(Kt, lp, lq, ls, p, q, cfg, partial, cap):
    n, m = Kt.shape
    H = [np.zeros((cap, n)), np.zeros((cap, m)), np.zeros((cap, n)), np.zeros((cap, m))]
    u, v, it, ok, P = _kernels.iterate(Kt, lp, lq, float(ls), p, q, float(cfg.tolerance),
                                       int(cfg.max_iterations), partial, *H)
    return u, v, int(it), bool(ok), H, P


def _solve(C, p, q, cfg: SolverConfig, partial: bool, s: float | None):
    Cv, p, q = _check_inputs(C, p, q)
    n, m = Cv.shape
    eps = cfg.epsilon
    if partial and s == 0.0:
        zero = np.zeros((n, m))
        plan = TransportPlan(zero, 0.0, 0, True, {"mass": 0.0, "epsilon": eps, "route": "dykstra"})
        if isinstance(C, tc.Var):
            plan.var = C.tape.constant(zero)
        return plan
    Kt = -Cv / eps
    lp, lq = _safe_log(p), _safe_log(q)
    ls = float(np.log(s)) if partial else 0.0
    u, v, it, ok, hist, P = _run(Kt, lp, lq, ls, p, q, cfg, partial, cfg.backward_cap)
    info = {"epsilon": eps, "route": "dykstra" if partial else "sinkhorn",
            "mass": float(s) if partial else float(p.sum())}
    out = TransportPlan(P, float(P.sum()), it, ok, info)
    if isinstance(C, tc.Var) and cfg.differentiate:
        def vjp(g):
            Kbar = _kernels.backward(Kt, lp, lq, ls, *hist, it, g * P, partial)
            return (-Kbar / eps,)

        out.var = C.tape.record("partial_ot" if partial else "sinkhorn", (C,), P, vjp)
    elif isinstance(C, tc.Var):
        out.var = C.tape.constant(P)
    return out


def sinkhorn(C, p, q, cfg: SolverConfig | None = None) -> TransportPlan:
    """Balanced entropic OT: argmin <pi, C> - eps H(pi) over Pi(p, q)."""
    cfg = cfg or SolverConfig()
    _, p_, q_ = _check_inputs(C, p, q)
    if abs(p_.sum() - q_.sum()) > 1e-12:
        raise ContractError(f"marginal sums differ: {p_.sum()!r} vs {q_.sum()!r}")
    return _solve(C, p, q, cfg, partial=False, s=None)


def partial_ot(C, p, q, cfg: SolverConfig | None = None) -> TransportPlan:
    """Entropic partial OT with mass budget ``cfg.mass`` (Dykstra projections)."""
    cfg = cfg or SolverConfig()
    _, p_, q_ = _check_inputs(C, p, q)
    s = cfg.resolve_mass(p_, q_)
    return _solve(C, p, q, cfg, partial=True, s=s)


def partial_ot_dummy(C, p, q, cfg: SolverConfig | None = None) -> TransportPlan:
    """Partial OT via an absorbing dummy row/column and balanced Sinkhorn.

    The dummy row carries ``sum q - s``, the dummy column ``sum p - s``, their
    crossing is forbidden.  The entropy then also acts on the slack masses,
    so this route matches :func:`partial_ot` only up to entropic bias; the two
    coincide as ``eps -> 0`` on instances with a unique LP optimum.
    """
    cfg = cfg or SolverConfig()
    C, p, q = _check_inputs(C, p, q)
    n, m = C.shape
    s = cfg.resolve_mass(p, q)
    if s == 0.0:
        return TransportPlan(np.zeros((n, m)), 0.0, 0, True, {"route": "dummy"})
    slack_r = max(q.sum() - s, 0.0)  # mass of the dummy row
    slack_c = max(p.sum() - s, 0.0)  # mass of the dummy column
    add_r, add_c = slack_r > 1e-15, slack_c > 1e-15
    Ca = np.zeros((n + add_r, m + add_c))
    Ca[:n, :m] = C
    if add_r and add_c:
        Ca[n, m] = np.inf
    pa = np.concatenate([p, [slack_r]] if add_r else [p])
    qa = np.concatenate([q, [slack_c]] if add_c else [q])
    Kt = -Ca / cfg.epsilon
    _, _, it, ok, _, P = _run(Kt, _safe_log(pa), _safe_log(qa), 0.0, pa, qa, cfg, False, 1)
    plan = P[:n, :m]
    return TransportPlan(plan, float(plan.sum()), it, ok, {"route": "dummy", "mass": s,
                                                          "epsilon": cfg.epsilon})


def exact_pot_lp(C, p, q, s: float) -> TransportPlan:
    """Exact unregularised partial OT by dense simplex (n, m <= 6)."""
    C, p, q = _check_inputs(C, p, q)
    n, m = C.shape
    if n > EXACT_LIMIT or m > EXACT_LIMIT:
        raise ContractError(f"exact oracle limited to {EXACT_LIMIT}x{EXACT_LIMIT}, got {n}x{m}")
    cap = min(p.sum(), q.sum())
    if s < 0 or s > cap + 1e-12:
        raise InfeasibleError(f"mass {s} outside [0, {cap}]")
    nv = n * m
    # variables: plan (row-major), row slacks, column slacks
    A = np.zeros((n + m + 1, nv + n + m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1.0
        A[i, nv + i] = 1.0
    for j in range(m):
        A[n + j, j:nv:m] = 1.0
        A[n + j, nv + n + j] = 1.0
    A[-1, :nv] = 1.0
    b = np.concatenate([p, q, [s]])
    c = np.concatenate([C.reshape(-1), np.zeros(n + m)])
    res = solve_standard_form(A, b, c)
    plan = res.x[:nv].reshape(n, m)
    return TransportPlan(plan, float(plan.sum()), res.pivots, True,
                         {"route": "simplex", "objective": res.objective,
                          "min_reduced_cost": res.min_nonbasic_reduced_cost})


def plan_diagnostics(plan, p, q, s: float) -> dict:
    P = np.asarray(plan.plan if isinstance(plan, TransportPlan) else plan, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if P.shape != (p.size, q.size):
        raise DimensionError(f"plan {P.shape} does not match marginals {p.size}, {q.size}")
    pos = P > 0
    return {
        "row_violation": float(np.max(np.maximum(0.0, P.sum(1) - p), initial=0.0)),
        "col_violation": float(np.max(np.maximum(0.0, P.sum(0) - q), initial=0.0)),
        "mass_error": float(abs(P.sum() - s)),
        "entropy": float(-np.sum(P[pos] * np.log(P[pos]))),
    }
