"""Compiled log-domain iteration kernels for :mod:`potalign.ot_solvers`.

State per iteration is the potential pair (u, v) and, for partial transport,
the Dykstra corrections (a1, a2) of the row and column inequality sets.
The plan is ``exp(Kt + u_i + v_j)`` with ``Kt = -C / eps``; ``Kt`` may hold
``-inf`` for forbidden cells.
"""
import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _row_lse(Kt, v, out):
    n, m = Kt.shape
    for i in range(n):
        mx = NEG_INF
        for j in range(m):
            x = Kt[i, j] + v[j]
            if x > mx:
                mx = x
        if mx == NEG_INF:
            out[i] = NEG_INF
            continue
        s = 0.0
        for j in range(m):
            s += np.exp(Kt[i, j] + v[j] - mx)
        out[i] = mx + np.log(s)


@njit(cache=True)
def _col_lse(Kt, u, out):
    n, m = Kt.shape
    for j in range(m):
        mx = NEG_INF
        for i in range(n):
            x = Kt[i, j] + u[i]
            if x > mx:
                mx = x
        if mx == NEG_INF:
            out[j] = NEG_INF
            continue
        s = 0.0
        for i in range(n):
            s += np.exp(Kt[i, j] + u[i] - mx)
        out[j] = mx + np.log(s)


@njit(cache=True)
def _all_lse(Kt, u, v):
    n, m = Kt.shape
    mx = NEG_INF
    for i in range(n):
        for j in range(m):
            x = Kt[i, j] + u[i] + v[j]
            if x > mx:
                mx = x
    s = 0.0
    for i in range(n):
        for j in range(m):
            s += np.exp(Kt[i, j] + u[i] + v[j] - mx)
    return mx + np.log(s)


@njit(cache=True)
def iterate(Kt, lp, lq, ls, p, q, tol, max_iter, partial, Hu, Hv, Ha1, Ha2):
    """Run to convergence; the last ``Hu.shape[0]`` start states go to H*.

    Returns (u, v, iterations, converged, plan).
    """
    n, m = Kt.shape
    cap = Hu.shape[0]
    u = np.zeros(n)
    v = np.zeros(m)
    a1 = np.zeros(n)
    a2 = np.zeros(m)
    r = np.empty(n)
    c = np.empty(m)
    P = np.empty((n, m))
    prev = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            prev[i, j] = np.exp(Kt[i, j])
    it = 0
    converged = False
    while it < max_iter:
        slot = it % cap
        Hu[slot] = u
        Hv[slot] = v
        Ha1[slot] = a1
        Ha2[slot] = a2
        it += 1
        if partial:
            _row_lse(Kt, v, r)
            for i in range(n):
                w = u[i] + a1[i]
                d = min(0.0, lp[i] - (w + r[i]))
                u[i] = w + d
                a1[i] = -d
            _col_lse(Kt, u, c)
            for j in range(m):
                z = v[j] + a2[j]
                e = min(0.0, lq[j] - (z + c[j]))
                v[j] = z + e
                a2[j] = -e
            t = ls - _all_lse(Kt, u, v)
            for i in range(n):
                u[i] += t
        else:
            _row_lse(Kt, v, r)
            for i in range(n):
                u[i] = lp[i] - r[i]
            _col_lse(Kt, u, c)
            for j in range(m):
                v[j] = lq[j] - c[j]
        err = 0.0
        for i in range(n):
            for j in range(m):
                P[i, j] = np.exp(Kt[i, j] + u[i] + v[j])
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += P[i, j]
            dev = s - p[i] if partial else abs(s - p[i])
            if partial:
                # an active correction means the row must be tight
                dev = max(dev, (p[i] - s) * (1.0 - np.exp(-a1[i])))
            if dev > err:
                err = dev
        if partial:
            for j in range(m):
                s = 0.0
                for i in range(n):
                    s += P[i, j]
                dev = max(s - q[j], (q[j] - s) * (1.0 - np.exp(-a2[j])))
                if dev > err:
                    err = dev
            for i in range(n):
                for j in range(m):
                    dev = abs(P[i, j] - prev[i, j])
                    if dev > err:
                        err = dev
        prev[:, :] = P
        if err <= tol:
            converged = True
            break
    return u, v, it, converged, P


@njit(cache=True)
def backward(Kt, lp, lq, ls, Hu, Hv, Ha1, Ha2, iters, G_log, partial):
    """Reverse sweep over the last min(iters, cap) iterations; returns dL/dKt."""
    n, m = Kt.shape
    cap = Hu.shape[0]
    steps = min(iters, cap)
    Kbar = G_log.copy()
    ub = np.zeros(n)
    vb = np.zeros(m)
    for i in range(n):
        for j in range(m):
            ub[i] += G_log[i, j]
            vb[j] += G_log[i, j]
    a1b = np.zeros(n)
    a2b = np.zeros(m)
    r = np.empty(n)
    c = np.empty(m)
    u1 = np.empty(n)
    v1 = np.empty(m)
    act_d = np.zeros(n, dtype=np.bool_)
    act_e = np.zeros(m, dtype=np.bool_)
    u1b = np.empty(n)
    v1b = np.empty(m)
    cb = np.empty(m)
    rb = np.empty(n)
    for k in range(steps):
        slot = (iters - 1 - k) % cap
        u0 = Hu[slot]
        v0 = Hv[slot]
        a10 = Ha1[slot]
        a20 = Ha2[slot]
        if partial:
            _row_lse(Kt, v0, r)
            for i in range(n):
                w = u0[i] + a10[i]
                x = lp[i] - (w + r[i])
                act_d[i] = x < 0.0
                u1[i] = w + (x if x < 0.0 else 0.0)
            _col_lse(Kt, u1, c)
            for j in range(m):
                z = v0[j] + a20[j]
                x = lq[j] - (z + c[j])
                act_e[j] = x < 0.0
                v1[j] = z + (x if x < 0.0 else 0.0)
            # mass step
            lt = _all_lse(Kt, u1, v1)
            tb = 0.0
            for i in range(n):
                tb -= ub[i]
            for i in range(n):
                u1b[i] = ub[i]
            for j in range(m):
                v1b[j] = vb[j]
            for i in range(n):
                for j in range(m):
                    g = tb * np.exp(Kt[i, j] + u1[i] + v1[j] - lt)
                    u1b[i] += g
                    v1b[j] += g
                    Kbar[i, j] += g
            # column step
            for j in range(m):
                eb = v1b[j] - a2b[j]
                cb[j] = -eb if act_e[j] else 0.0
                vb[j] = v1b[j] + cb[j]   # adjoint of v0 via z = v0 + a2
                a2b[j] = vb[j]
            for i in range(n):
                for j in range(m):
                    g = np.exp(Kt[i, j] + u1[i] - c[j]) * cb[j]
                    u1b[i] += g
                    Kbar[i, j] += g
            # row step
            for i in range(n):
                db = u1b[i] - a1b[i]
                rb[i] = -db if act_d[i] else 0.0
                ub[i] = u1b[i] + rb[i]
                a1b[i] = ub[i]
            for i in range(n):
                for j in range(m):
                    g = np.exp(Kt[i, j] + v0[j] - r[i]) * rb[i]
                    vb[j] += g
                    Kbar[i, j] += g
        else:
            _row_lse(Kt, v0, r)
            for i in range(n):
                u1[i] = lp[i] - r[i]
            _col_lse(Kt, u1, c)
            for j in range(m):
                cb[j] = -vb[j]
            for i in range(n):
                u1b[i] = ub[i]
            for i in range(n):
                for j in range(m):
                    g = np.exp(Kt[i, j] + u1[i] - c[j]) * cb[j]
                    u1b[i] += g
                    Kbar[i, j] += g
            for j in range(m):
                vb[j] = 0.0
            for i in range(n):
                rb[i] = -u1b[i]
                ub[i] = 0.0
            for i in range(n):
                for j in range(m):
                    g = np.exp(Kt[i, j] + v0[j] - r[i]) * rb[i]
                    vb[j] += g
                    Kbar[i, j] += g
    return Kbar


@njit(cache=True)
def jacobi_sweeps(A, V, tol, max_sweeps):
    """Cyclic Jacobi rotations in place on symmetric ``A``; returns sweeps used or -1."""
    n = A.shape[0]
    scale = 1e-300
    for i in range(n):
        for j in range(n):
            if abs(A[i, j]) > scale:
                scale = abs(A[i, j])
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i):
                off += A[i, j] * A[i, j]
        if np.sqrt(off) <= tol * scale:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta != 0.0:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                else:
                    t = 1.0
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = cs * akp - sn * akq
                    A[k, q] = sn * akp + cs * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = cs * apk - sn * aqk
                    A[q, k] = sn * apk + cs * aqk
                for k in range(n):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = cs * vkp - sn * vkq
                    V[k, q] = sn * vkp + cs * vkq
    return -1
