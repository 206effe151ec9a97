"""Compiled inner loops for the log-domain scaling solvers.

Potentials are updated in place. Every loop is a plain block-coordinate
update of the entropic dual; see ``ot.py`` for the maths.
"""

import math

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _row_lse(cost, g, c, eps, i):
    M = cost.shape[1]
    m = NEG_INF
    for j in range(M):
        v = (g[j] + c - cost[i, j]) / eps
        if v > m:
            m = v
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for j in range(M):
        s += math.exp((g[j] + c - cost[i, j]) / eps - m)
    return math.log(s) + m


@njit(cache=True)
def _col_lse(cost, f, c, eps, j):
    N = cost.shape[0]
    m = NEG_INF
    for i in range(N):
        v = (f[i] + c - cost[i, j]) / eps
        if v > m:
            m = v
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for i in range(N):
        s += math.exp((f[i] + c - cost[i, j]) / eps - m)
    return math.log(s) + m


@njit(cache=True)
def _plan_sums(cost, f, g, c, eps, rows, cols):
    N, M = cost.shape
    rows[:] = 0.0
    cols[:] = 0.0
    total = 0.0
    for i in range(N):
        for j in range(M):
            v = math.exp((f[i] + g[j] + c - cost[i, j]) / eps)
            rows[i] += v
            cols[j] += v
            total += v
    return total


@njit(cache=True)
def sinkhorn_loop(cost, eps, logp, logq, p, q, f, g, max_iter, tol, trace):
    """Returns ``(iterations, row_error)``; ``trace[k]`` receives the dual objective."""
    N, M = cost.shape
    rows = np.empty(N)
    cols = np.empty(M)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(N):
            f[i] = eps * (logp[i] - _row_lse(cost, g, 0.0, eps, i))
        for j in range(M):
            g[j] = eps * (logq[j] - _col_lse(cost, f, 0.0, eps, j))
        total = _plan_sums(cost, f, g, 0.0, eps, rows, cols)
        err = 0.0
        for i in range(N):
            err += abs(rows[i] - p[i])
        if trace.shape[0] >= it:
            val = eps * total
            for i in range(N):
                if p[i] > 0:
                    val -= f[i] * p[i]
            for j in range(M):
                if q[j] > 0:
                    val -= g[j] * q[j]
            trace[it - 1] = val
        if err < tol:
            break
    return it, err


@njit(cache=True)
def _waterfill(logr, logp, logs, out):
    """Exact KL projection onto ``{sums <= p, total = s}`` for one side.

    Given log masses ``logr`` of the unscaled rows (or columns), finds the
    common log scale ``loglam`` such that ``sum(min(p, lam * r)) = s`` and
    writes the per-row log cap factors ``min(logp - logr - loglam, 0)`` into
    ``out``. Returns ``loglam``.
    """
    n = logr.shape[0]
    t = logp - logr  # log scale at which each row saturates
    order = np.argsort(t)
    capped = 0.0  # total cap of the rows already saturated
    loglam = NEG_INF
    for k in range(n + 1):
        # rows order[:k] capped, the rest scaled by lam
        rem = math.exp(logs) - capped
        if k == n:
            loglam = t[order[n - 1]]
            break
        if rem > 0:
            m = NEG_INF
            for idx in range(k, n):
                v = logr[order[idx]]
                if v > m:
                    m = v
            if m > NEG_INF:
                acc = 0.0
                for idx in range(k, n):
                    acc += math.exp(logr[order[idx]] - m)
                cand = math.log(rem) - (math.log(acc) + m)
                if cand <= t[order[k]]:
                    loglam = cand
                    break
        capped += math.exp(logp[order[k]])
    for i in range(n):
        d = t[i] - loglam
        out[i] = d if d < 0 else 0.0
    return loglam


@njit(cache=True)
def dykstra_loop(cost, eps, logp, logq, logs, p, q, f, g, c0, n_cycles, tol):
    """Alternating KL projections onto ``{rows <= p, total = s}`` and
    ``{cols <= q, total = s}``. Returns ``(c, cycles, converged)``.

    ``tol <= 0`` disables the KKT stopping test.
    """
    N, M = cost.shape
    rows = np.empty(N)
    cols = np.empty(M)
    logr = np.empty(N)
    logc = np.empty(M)
    fac_r = np.empty(N)
    fac_c = np.empty(M)
    c = c0
    for it in range(1, n_cycles + 1):
        for i in range(N):
            logr[i] = _row_lse(cost, g, 0.0, eps, i)
        lam = _waterfill(logr, logp, logs, fac_r)
        for i in range(N):
            f[i] = eps * fac_r[i]
        c = eps * lam
        for j in range(M):
            logc[j] = _col_lse(cost, f, 0.0, eps, j)
        lam = _waterfill(logc, logq, logs, fac_c)
        for j in range(M):
            g[j] = eps * fac_c[j]
        c = eps * lam
        if tol > 0:
            _plan_sums(cost, f, g, c, eps, rows, cols)
            res = 0.0
            for i in range(N):
                d = rows[i] - p[i]
                res += abs(d) if f[i] < 0 else max(d, 0.0)
            for j in range(M):
                d = cols[j] - q[j]
                res += abs(d) if g[j] < 0 else max(d, 0.0)
            if res < tol:
                return c, it, True
    return c, n_cycles, False


@njit(cache=True)
def score_hypotheses(R, t, src, dst, thresh):
    """Inlier counts and inlier sums of squared residuals for each rigid hypothesis."""
    B = R.shape[0]
    n = src.shape[0]
    counts = np.zeros(B, dtype=np.int64)
    sse = np.zeros(B)
    th2 = thresh * thresh
    for b in range(B):
        c = 0
        s = 0.0
        for k in range(n):
            r2 = 0.0
            for i in range(3):
                v = R[b, i, 0] * src[k, 0] + R[b, i, 1] * src[k, 1] + R[b, i, 2] * src[k, 2] + t[b, i] - dst[k, i]
                r2 += v * v
            if r2 <= th2:
                c += 1
                s += r2
        counts[b] = c
        sse[b] = s
    return counts, sse
