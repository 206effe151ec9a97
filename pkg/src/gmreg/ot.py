"""Entropic optimal transport, partial transport and proximal graph matching.

All scaling iterations run on dual potentials in the log domain, so small
entropic scales do not underflow. Every returned plan is passed through
:func:`round_to_feasible`, which moves an approximately feasible plan exactly
onto its constraint set.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels
from .affinity import CostMatrices, gw_linearized_cost, gw_objective

EQUALITY = "equality"
INEQUALITY = "inequality"
LOG_FLOOR = np.log(1e-300)
ORACLE_MAX_SIZE = 8


@dataclass(frozen=True, eq=False)
class Marginals:
    """Row/column histograms plus the constraint mode.

    In ``"inequality"`` mode the plan must satisfy ``rows <= p``, ``cols <= q``
    and carry total mass ``s``.
    """

    p: np.ndarray
    q: np.ndarray
    mode: str = EQUALITY
    s: float | None = None

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64).ravel()
        q = np.array(self.q, dtype=np.float64).ravel()
        for name, h in (("p", p), ("q", q)):
            if len(h) == 0 or not np.all(np.isfinite(h)) or np.any(h < 0):
                raise ValueError(f"{name} must be a non-empty, finite, non-negative histogram")
            if abs(h.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1, got {h.sum()!r}")
        if self.mode not in (EQUALITY, INEQUALITY):
            raise ValueError(f"unknown marginal mode {self.mode!r}")
        if self.mode == INEQUALITY:
            if self.s is None or not np.isfinite(self.s) or self.s <= 0:
                raise ValueError("inequality marginals need a transport mass s > 0")
            if self.s > min(p.sum(), q.sum()) + 1e-12:
                raise ValueError("infeasible mass")
            object.__setattr__(self, "s", float(self.s))
        else:
            object.__setattr__(self, "s", None)
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, n, m, s=None):
        mode = EQUALITY if s is None else INEQUALITY
        return cls(np.full(n, 1.0 / n), np.full(m, 1.0 / m), mode, s)

    @property
    def shape(self):
        return len(self.p), len(self.q)

    @property
    def mass(self):
        return 1.0 if self.mode == EQUALITY else self.s

    def violation(self, gamma):
        """Largest constraint violation of ``gamma`` (0 when exactly feasible)."""
        rows, cols = gamma.sum(axis=1), gamma.sum(axis=0)
        neg = max(0.0, -float(gamma.min()))
        if self.mode == EQUALITY:
            return max(neg, np.abs(rows - self.p).max(), np.abs(cols - self.q).max())
        return max(
            neg,
            float(np.max(rows - self.p)),
            float(np.max(cols - self.q)),
            abs(float(gamma.sum()) - self.s),
        )

    def is_feasible(self, gamma, tol_marg=1e-6, tol_cap=1e-8):
        rows, cols = gamma.sum(axis=1), gamma.sum(axis=0)
        if gamma.shape != self.shape or np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            return False
        if self.mode == EQUALITY:
            return bool(np.all(np.abs(rows - self.p) <= tol_marg) and np.all(np.abs(cols - self.q) <= tol_marg))
        return bool(
            np.all(rows <= self.p + tol_cap)
            and np.all(cols <= self.q + tol_cap)
            and abs(gamma.sum() - self.s) <= tol_marg
        )


@dataclass
class SolverConfig:
    epsilon: float = 5e-3
    outer_iters: int = 50
    inner_iters: int = 1
    tol: float = 1e-6
    seed: int = 0
    max_iter: int = 20000

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters (L) must be >= 1")
        if self.outer_iters < 1 or self.max_iter < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class TransportPlan:
    gamma: np.ndarray
    marginals: Marginals
    objective_trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def mass(self):
        return float(self.gamma.sum())

    def cost(self, C):
        return float(np.sum(np.asarray(C) * self.gamma))


def _as_cost(cost, marg):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape != marg.shape:
        raise ValueError(f"cost has shape {cost.shape}, marginals expect {marg.shape}")
    if np.any(np.isnan(cost)):
        raise ValueError("cost contains NaN")
    return cost


def _lse(A, axis=None):
    """log-sum-exp; plain numpy because scipy's wrapper dominates on small matrices."""
    m = np.max(A, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(A - m), axis=axis, keepdims=True)) + m
    return out.squeeze() if axis is None else np.squeeze(out, axis=axis)


def _log_hist(h):
    with np.errstate(divide="ignore"):
        return np.log(h)


def _check_kernel(cost):
    if np.any(np.all(~np.isfinite(cost), axis=1)) or np.any(np.all(~np.isfinite(cost), axis=0)):
        raise FloatingPointError("kernel underflow; raise epsilon")


def round_to_feasible(gamma, marg):
    """Move a non-negative plan onto the constraint set of ``marg``.

    Rows and columns are first scaled down to their caps; the missing mass is
    then added as a rank-one product of the row and column slacks, which
    cannot overshoot any cap.
    """
    X = np.maximum(np.asarray(gamma, dtype=np.float64), 0.0)
    p, q = marg.p, marg.q
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = X.sum(axis=1)
        X *= np.where(r > p, p / np.where(r > 0, r, 1.0), 1.0)[:, None]
        c = X.sum(axis=0)
        X *= np.where(c > q, q / np.where(c > 0, c, 1.0), 1.0)[None, :]
    a = np.maximum(p - X.sum(axis=1), 0.0)
    b = np.maximum(q - X.sum(axis=0), 0.0)
    if marg.mode == EQUALITY:
        if b.sum() > 0:
            X += np.outer(a, b) / b.sum()
        return X
    missing = marg.s - X.sum()
    if missing > 0:
        if a.sum() > 0 and b.sum() > 0:
            X += missing * np.outer(a, b) / (a.sum() * b.sum())
    elif missing < 0:
        X *= marg.s / X.sum()
    return X


def _sinkhorn_potentials(cost, marg, eps, f, g, max_iter, tol, trace=None):
    """Alternating exact row/column updates of the potentials ``f``, ``g`` (in place)."""
    buf = np.empty(max_iter if trace is not None else 0)
    n, err = _kernels.sinkhorn_loop(
        cost, eps, _log_hist(marg.p), _log_hist(marg.q), marg.p, marg.q, f, g, max_iter, tol, buf,
    )
    if trace is not None:
        trace.extend(buf[:n].tolist())
    return n, err


def _spread(cost):
    finite = cost[np.isfinite(cost)]
    return float(finite.max() - finite.min()) if finite.size else 0.0


def sinkhorn(cost, marg, cfg=None, eps_scaling=True):
    """Entropic OT with equality marginals.

    ``objective_trace`` records the dual objective being minimised by the
    alternating updates at the target ``epsilon``; it is non-increasing.
    """
    cfg = cfg or SolverConfig()
    if marg.mode != EQUALITY:
        raise ValueError("sinkhorn requires equality marginals")
    cost = _as_cost(cost, marg)
    _check_kernel(cost)
    eps = cfg.epsilon
    f = np.zeros(cost.shape[0])
    g = np.zeros(cost.shape[1])
    if eps_scaling:
        # coarse-to-fine warm start; only the last stage counts towards the trace
        e = _spread(cost)
        while e > eps:
            _sinkhorn_potentials(cost, marg, e, f, g, 200, 1e-3)
            e *= 0.5
    trace = []
    n, err = _sinkhorn_potentials(cost, marg, eps, f, g, cfg.max_iter, cfg.tol, trace)
    gamma = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return TransportPlan(round_to_feasible(gamma, marg), marg, trace, n, bool(err < cfg.tol))


class _DykstraState:
    """Dual potentials of the partial transport projections.

    The plan is ``exp((f_i + g_j + c - cost_ij) / eps)`` with row potential
    ``f <= 0``, column potential ``g <= 0`` and a free mass potential ``c``.
    A cycle projects onto ``{rows <= p, total = s}`` and then onto
    ``{cols <= q, total = s}``; each projection has a closed form (a
    water-filling scale) and is an exact maximisation of the dual over
    ``(f, c)`` or ``(g, c)``, so the Dykstra corrections are implicit.
    Folding the mass constraint into both projections avoids the slow
    zig-zag between the caps and the mass rescaling on peaked kernels.
    """

    def __init__(self, cost, marg, eps):
        self.f = np.zeros(cost.shape[0])
        self.g = np.zeros(cost.shape[1])
        # start from the kernel rescaled to the target mass
        self.c = eps * (np.log(marg.mass) - _lse(-cost / eps))

    def run(self, cost, marg, eps, n_cycles, tol=0.0):
        """Run up to ``n_cycles`` cycles; ``tol > 0`` stops on the KKT residual."""
        self.c, n, ok = _kernels.dykstra_loop(
            cost, eps, _log_hist(marg.p), _log_hist(marg.q), np.log(marg.mass),
            marg.p, marg.q, self.f, self.g, float(self.c), n_cycles, tol,
        )
        return n, ok

    def save(self):
        return self.f.copy(), self.g.copy(), self.c

    def restore(self, saved):
        self.f[:], self.g[:], self.c = saved[0], saved[1], saved[2]

    def log_plan(self, cost, eps):
        return (self.f[:, None] + self.g[None, :] + self.c - cost) / eps


def partial_ot_dykstra(cost, marg, cfg=None):
    """Entropic partial OT: ``rows <= p``, ``cols <= q``, total mass ``s``."""
    cfg = cfg or SolverConfig()
    if marg.mode != INEQUALITY:
        raise ValueError("partial_ot_dykstra requires inequality marginals")
    cost = _as_cost(cost, marg)
    _check_kernel(cost)
    eps = cfg.epsilon
    state = _DykstraState(cost, marg, max(_spread(cost), eps))
    e = _spread(cost)
    while e > eps:
        state.run(cost, marg, e, 200, tol=1e-3)
        e *= 0.5
    n, ok = state.run(cost, marg, eps, cfg.max_iter, tol=cfg.tol)
    gamma = np.exp(state.log_plan(cost, eps))
    return TransportPlan(round_to_feasible(gamma, marg), marg, [float(np.sum(cost * gamma))], n, ok)


MAX_STEP_HALVINGS = 30
_DESCENT_SLACK = 1e-12


def _proximal(C, marg, cfg):
    """Inexact proximal point loop shared by the partial and full solvers.

    Step ``n`` runs ``cfg.inner_iters`` scaling cycles on the kernel
    ``gamma^n * exp(-cbar^n / eps)`` with the Dykstra correction terms (dual
    potentials) carried over from step ``n - 1``. Writing
    ``gamma^n = exp(f + g + c - A)`` in units of ``eps``, that is the same as
    running the cycles on ``A + cbar^n / eps`` from the previous potentials,
    which is how it is evaluated here. Restarting the corrections from zero
    with ``inner_iters = 1`` lets the mass projection undo the caps.

    The linearised step is not a majoriser of the quadratic objective, so a
    step that raises it is retried with half the step size (twice the
    proximal weight). The step starts small and doubles up to ``1 / eps``;
    a full first step from the uniform plan tends to land in a poor local
    minimum. Stationary points do not depend on the step size.
    """
    if C.shape != marg.shape:
        raise ValueError(f"cost matrices have shape {C.shape}, marginals expect {marg.shape}")
    step0 = 1.0 / cfg.epsilon
    gamma = np.outer(marg.p, marg.q) * marg.mass
    A = -np.maximum(_log_hist(gamma), LOG_FLOOR)
    N, M = marg.shape
    f, g = np.zeros(N), np.zeros(M)
    state = None if marg.mode == EQUALITY else _DykstraState(A, marg, 1.0)
    obj = gw_objective(C, gamma)
    # the linear problem is convex; only the quadratic term needs a warm-up
    step = None if (C.Cp.any() or C.Cq.any()) else step0
    trace = []
    converged = False
    n = 0
    for n in range(1, cfg.outer_iters + 1):
        cbar = gw_linearized_cost(C, gamma) + C.Cpq
        if step is None:
            # warm-up: the first step moves log(gamma) by about one unit
            step = min(step0, 1.0 / max(np.ptp(cbar), 1e-300))
        saved = (f.copy(), g.copy()) if state is None else state.save()
        for _ in range(MAX_STEP_HALVINGS + 1):
            cand = A + step * cbar
            if state is None:
                _sinkhorn_potentials(cand, marg, 1.0, f, g, cfg.inner_iters, 0.0)
                log_plan = f[:, None] + g[None, :] - cand
            else:
                state.run(cand, marg, 1.0, cfg.inner_iters)
                log_plan = state.log_plan(cand, 1.0)
            new_gamma = np.exp(log_plan)
            if not np.all(np.isfinite(new_gamma)):
                raise FloatingPointError("kernel underflow; raise epsilon")
            new_obj = gw_objective(C, new_gamma)
            if new_obj <= obj + _DESCENT_SLACK * max(1.0, abs(obj)):
                break
            step *= 0.5
            if state is None:
                f[:], g[:] = saved
            else:
                state.restore(saved)
        else:
            # no descent step exists at this resolution: gamma is stationary
            trace.append(obj)
            converged = True
            break
        A = cand
        trace.append(new_obj)
        delta = np.abs(new_gamma - gamma).sum()
        gamma, obj = new_gamma, new_obj
        step = min(2.0 * step, step0)
        if delta < cfg.tol:
            converged = True
            break
    return TransportPlan(round_to_feasible(gamma, marg), marg, trace, n, converged)


def pgm_proximal(C: CostMatrices, marg: Marginals, cfg: SolverConfig | None = None) -> TransportPlan:
    """Partial graph matching by inexact proximal point iterations.

    Each outer step linearises the quadratic term at the current plan and runs
    ``cfg.inner_iters`` Dykstra cycles on the kernel
    ``gamma^n * exp(-(L(gamma^n) + Cpq) / eps)``.
    """
    cfg = cfg or SolverConfig()
    if marg.mode != INEQUALITY:
        raise ValueError("pgm_proximal requires inequality marginals")
    return _proximal(C, marg, cfg)


def fgm_solve(C: CostMatrices, marg: Marginals, cfg: SolverConfig | None = None) -> TransportPlan:
    """Full graph matching with the same proximal scheme (Sinkhorn cycles for equality marginals)."""
    return _proximal(C, marg, cfg or SolverConfig())


def assignment_scale(marg):
    """Factor turning a probability plan into a doubly (sub)stochastic one."""
    return 1.0 / max(marg.p.max(), marg.q.max())


def fgm_objective(C, gamma, marg=None):
    """``||Cp - G Cq G^T||_F + tr(Cpq^T G)`` on the (sub)stochastic rescaling ``G`` of ``gamma``."""
    if marg is None:
        marg = Marginals.uniform(*C.shape)
    G = np.asarray(gamma) * assignment_scale(marg)
    return float(np.linalg.norm(C.Cp - G @ C.Cq @ G.T) + np.sum(C.Cpq * G))


# --------------------------------------------------------------------------
# exact oracles for small instances


def _integer_units(marg, max_units=20000):
    vals = list(marg.p) + list(marg.q) + ([marg.s] if marg.mode == INEQUALITY else [])
    fracs = [Fraction(float(v)).limit_denominator(1000) for v in vals]
    if any(abs(float(fr) - v) > 1e-9 for fr, v in zip(fracs, vals)):
        raise ValueError("oracle needs marginals with small rational entries")
    U = 1
    for fr in fracs:
        U = lcm(U, fr.denominator)
    if U > max_units:
        raise ValueError("marginal denominators too large for the assignment oracle")
    return U, [int(fr * U) for fr in fracs]


def _linear_oracle_assignment(cost, marg):
    """Expand capacities into unit copies and solve one assignment problem."""
    N, M = cost.shape
    U, units = _integer_units(marg)
    rows = np.repeat(np.arange(N), units[:N])
    cols = np.repeat(np.arange(M), units[N:N + M])
    R, Cn = len(rows), len(cols)
    S = units[-1] if marg.mode == INEQUALITY else R
    if marg.mode == EQUALITY and R != Cn:
        raise ValueError("inconsistent marginals")
    big = (np.abs(cost).max() + 1.0) * (R + Cn + 1)
    size = R + Cn - S
    A = np.zeros((size, size))
    A[:R, :Cn] = cost[np.ix_(rows, cols)]
    # dummy rows (index >= R) may take real columns; dummy columns may take real rows
    A[R:, Cn:] = big
    r_idx, c_idx = linear_sum_assignment(A)
    gamma = np.zeros((N, M))
    for a, b in zip(r_idx, c_idx):
        if a < R and b < Cn:
            gamma[rows[a], cols[b]] += 1.0 / U
    return gamma


def _permutation_matrices(n):
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    return perms


def exact_small_oracle(marg, cost=None, C=None):
    """Exact optimum for instances with at most 8 rows and columns.

    Linear problems (``cost``) with equal-sized uniform equality marginals are
    solved by enumerating permutations; other linear problems by expanding
    the capacities into unit copies and solving the resulting assignment
    problem exactly. Quadratic problems (``C``) enumerate every partial
    injection whose pairs each carry the mass ``1 / max(N, M)``.
    """
    if (cost is None) == (C is None):
        raise ValueError("pass exactly one of cost or C")
    N, M = marg.shape
    if N > ORACLE_MAX_SIZE or M > ORACLE_MAX_SIZE:
        raise ValueError(f"oracle limited to size <= {ORACLE_MAX_SIZE}, got {N}x{M}")
    uniform = np.allclose(marg.p, 1.0 / N, atol=1e-12) and np.allclose(marg.q, 1.0 / M, atol=1e-12)
    if cost is not None:
        cost = _as_cost(cost, marg)
        if marg.mode == EQUALITY and N == M and uniform:
            perms = _permutation_matrices(N)
            totals = cost[np.arange(N), perms].sum(axis=1)
            best = perms[np.argmin(totals)]
            gamma = np.zeros((N, M))
            gamma[np.arange(N), best] = 1.0 / N
        else:
            gamma = _linear_oracle_assignment(cost, marg)
        return TransportPlan(gamma, marg, [float(np.sum(cost * gamma))], 0, True)

    if C.shape != (N, M):
        raise ValueError("cost matrices do not match marginals")
    if not uniform:
        raise ValueError("quadratic oracle supports uniform marginals only")
    w = 1.0 / max(N, M)
    if marg.mode == EQUALITY:
        if N != M:
            raise ValueError("quadratic oracle with equality marginals needs N == M")
        k = N
    else:
        k = marg.s / w
        if abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ValueError("s must be a whole number of pair masses 1/max(N, M)")
        k = int(round(k))
    best_val, best = np.inf, None
    for rows in itertools.combinations(range(N), k):
        for cols in itertools.permutations(range(M), k):
            gamma = np.zeros((N, M))
            gamma[list(rows), list(cols)] = w
            val = gw_objective(C, gamma)
            if val < best_val - 1e-15:
                best_val, best = val, gamma
    return TransportPlan(best, marg, [best_val], 0, True)
