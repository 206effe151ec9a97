import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from gmreg.affinity import CostMatrices, fine_affinities, gw_objective
from gmreg.geometry import PointCloud, random_rotation
from gmreg.ot import (
    Marginals, SolverConfig, exact_small_oracle, fgm_objective, fgm_solve, partial_ot_dykstra,
    pgm_proximal, round_to_feasible, sinkhorn,
)


def lp_optimum(cost, marg):
    """Independent LP oracle (HiGHS) for linear transport with either constraint mode."""
    N, M = cost.shape
    A_rows = np.kron(np.eye(N), np.ones(M))
    A_cols = np.kron(np.ones(N), np.eye(M))
    if marg.mode == "equality":
        res = linprog(cost.ravel(), A_eq=np.vstack([A_rows, A_cols]), b_eq=np.r_[marg.p, marg.q],
                      bounds=(0, None), method="highs")
    else:
        res = linprog(cost.ravel(), A_ub=np.vstack([A_rows, A_cols]), b_ub=np.r_[marg.p, marg.q],
                      A_eq=np.ones((1, N * M)), b_eq=[marg.s], bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


# -- marginals ---------------------------------------------------------------

def test_marginals_validation():
    with pytest.raises(ValueError):
        Marginals([0.5, 0.6], [1.0])
    with pytest.raises(ValueError):
        Marginals([1.0, -0.0 - 1e-3], [1.0])
    with pytest.raises(ValueError, match="infeasible mass"):
        Marginals.uniform(3, 3, 1.5)
    with pytest.raises(ValueError):
        Marginals.uniform(3, 3, 0.0)
    with pytest.raises(ValueError):
        SolverConfig(epsilon=0)
    with pytest.raises(ValueError):
        SolverConfig(inner_iters=0)
    assert Marginals.uniform(2, 3).mass == 1.0


@given(st.integers(0, 10_000), st.booleans())
def test_round_to_feasible(seed, partial):
    rng = np.random.default_rng(seed)
    N, M = rng.integers(1, 9, 2)
    p, q = rng.dirichlet(np.ones(N)), rng.dirichlet(np.ones(M))
    marg = Marginals(p, q, "inequality", rng.uniform(0.05, 1.0) * min(1.0, 1.0)) if partial else Marginals(p, q)
    G = round_to_feasible(rng.uniform(size=(N, M)) * rng.uniform(0, 3), marg)
    assert marg.is_feasible(G)


# -- sinkhorn ----------------------------------------------------------------

def test_sinkhorn_zero_cost():
    plan = sinkhorn(np.zeros((4, 4)), Marginals.uniform(4, 4))
    assert np.abs(plan.gamma - 1 / 16).max() < 1e-8


def test_sinkhorn_near_lp_optimum():
    rng = np.random.default_rng(0)
    for _ in range(10):
        C = rng.uniform(size=(4, 4))
        marg = Marginals.uniform(4, 4)
        plan = sinkhorn(C, marg, SolverConfig(epsilon=1e-3))
        opt = exact_small_oracle(marg, cost=C).objective_trace[0]
        assert plan.cost(C) <= 1.01 * opt
        assert opt == pytest.approx(lp_optimum(C, marg), abs=1e-9)


def test_sinkhorn_permutation_cost():
    rng = np.random.default_rng(1)
    perm = rng.permutation(6)
    C = np.ones((6, 6))
    C[np.arange(6), perm] = 0.0
    plan = sinkhorn(C, Marginals.uniform(6, 6), SolverConfig(epsilon=0.05))
    assert plan.gamma[np.arange(6), perm].sum() >= 0.99


def test_sinkhorn_trace_monotone_and_errors():
    rng = np.random.default_rng(2)
    C = rng.uniform(size=(7, 5))
    plan = sinkhorn(C, Marginals.uniform(7, 5), SolverConfig(epsilon=1e-2, tol=1e-12))
    tr = np.array(plan.objective_trace)
    assert len(tr) > 2 and np.diff(tr).max() <= 1e-9
    with pytest.raises(ValueError):
        sinkhorn(C, Marginals.uniform(7, 5, 0.5))
    with pytest.raises(ValueError):
        sinkhorn(C.T, Marginals.uniform(7, 5))
    bad = C.copy()
    bad[0] = np.inf
    with pytest.raises(FloatingPointError, match="kernel underflow"):
        sinkhorn(bad, Marginals.uniform(7, 5))


def test_sinkhorn_tiny_epsilon_is_stable():
    rng = np.random.default_rng(3)
    C = rng.uniform(size=(5, 5)) * 100
    marg = Marginals.uniform(5, 5)
    plan = sinkhorn(C, marg, SolverConfig(epsilon=1e-4))
    assert np.all(np.isfinite(plan.gamma)) and marg.is_feasible(plan.gamma)


def test_sinkhorn_gap_monotone_in_epsilon():
    rng = np.random.default_rng(4)
    for _ in range(5):
        C = rng.uniform(size=(5, 5))
        marg = Marginals.uniform(5, 5)
        opt = lp_optimum(C, marg)
        gaps = [sinkhorn(C, marg, SolverConfig(epsilon=e)).cost(C) - opt for e in (1e-1, 1e-2, 1e-3)]
        assert gaps[0] >= gaps[1] - 1e-9 and gaps[1] >= gaps[2] - 1e-9


# -- partial -----------------------------------------------------------------

def test_partial_full_mass_matches_sinkhorn():
    rng = np.random.default_rng(5)
    C = rng.uniform(size=(4, 4))
    cfg = SolverConfig(epsilon=0.05, tol=1e-12)
    a = partial_ot_dykstra(C, Marginals.uniform(4, 4, 1.0), cfg).gamma
    b = sinkhorn(C, Marginals.uniform(4, 4), cfg).gamma
    assert np.abs(a - b).max() < 1e-6


def test_partial_zero_cost_feasibility():
    marg = Marginals.uniform(3, 3, 0.5)
    G = partial_ot_dykstra(np.zeros((3, 3)), marg).gamma
    assert abs(G.sum() - 0.5) < 1e-8
    assert np.all(G.sum(1) <= 1 / 3 + 1e-8) and np.all(G.sum(0) <= 1 / 3 + 1e-8)


def test_partial_near_lp_optimum():
    rng = np.random.default_rng(6)
    C = rng.uniform(size=(4, 5))
    marg = Marginals.uniform(4, 5, 0.6)
    plan = partial_ot_dykstra(C, marg, SolverConfig(epsilon=1e-3))
    opt = exact_small_oracle(marg, cost=C).objective_trace[0]
    assert opt == pytest.approx(lp_optimum(C, marg), abs=1e-9)
    assert plan.cost(C) <= 1.02 * opt


def test_partial_errors():
    with pytest.raises(ValueError):
        partial_ot_dykstra(np.zeros((2, 2)), Marginals.uniform(2, 2))


# -- proximal graph matching ------------------------------------------------

def test_pgm_self_matching():
    for seed in range(5):
        X = np.random.default_rng(seed).uniform(size=(12, 3))
        D = cdist(X, X)
        D = 0.5 * (D + D.T)
        C = CostMatrices(D, D, np.zeros((12, 12)))
        plan = pgm_proximal(C, Marginals.uniform(12, 12, 1.0))
        assert np.mean(plan.gamma.argmax(1) == np.arange(12)) >= 0.95


def test_pgm_ignores_far_outliers():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(6, 3))
        Y = np.vstack([X, rng.uniform(size=(3, 3)) + 10])
        F = rng.normal(size=(6, 4))
        C = fine_affinities(PointCloud(X, F), PointCloud(Y, np.vstack([F, rng.normal(size=(3, 4))])))
        plan = pgm_proximal(C, Marginals.uniform(6, 9, 6 / 9))
        assert plan.gamma[:, 6:].sum() < 0.05 * plan.gamma.sum()


@given(st.integers(0, 10_000))
def test_pgm_trace_monotone(seed):
    rng = np.random.default_rng(seed)
    N, M = rng.integers(3, 9, 2)
    C = fine_affinities(PointCloud(rng.uniform(size=(N, 3)), rng.normal(size=(N, 4))),
                        PointCloud(rng.uniform(size=(M, 3)), rng.normal(size=(M, 4))))
    marg = Marginals.uniform(N, M, rng.uniform(0.2, 1.0))
    plan = pgm_proximal(C, marg, SolverConfig(epsilon=rng.choice([5e-3, 2e-2])))
    tr = np.array(plan.objective_trace)
    assert len(tr) == 0 or np.diff(tr[1:]).max(initial=0) <= 1e-7
    assert marg.is_feasible(plan.gamma)
    assert gw_objective(C, plan.gamma) <= gw_objective(C, np.outer(marg.p, marg.q) * marg.s) + 1e-9


def test_pgm_requires_inequality():
    C = CostMatrices(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        pgm_proximal(C, Marginals.uniform(2, 2))
    with pytest.raises(ValueError):
        pgm_proximal(C, Marginals.uniform(3, 2, 0.5))


def rigid_pair(m, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(m, 3))
    perm = rng.permutation(m)
    Y = (X @ random_rotation(rng).T + rng.normal(size=3))[perm]
    return fine_affinities(PointCloud(X, X), PointCloud(Y, X[perm])), np.argsort(perm)


def test_fgm_recovers_permutation():
    for seed in range(10):
        C, truth = rigid_pair(8, seed)
        marg = Marginals.uniform(8, 8)
        plan = fgm_solve(C, marg)
        assert np.array_equal(plan.gamma.argmax(1), truth)
        uniform = np.full((8, 8), 1 / 64)
        assert fgm_objective(C, plan.gamma, marg) <= fgm_objective(C, uniform, marg)


def test_fgm_linear_case_matches_sinkhorn():
    Cpq = np.random.default_rng(3).uniform(size=(5, 5))
    C = CostMatrices(np.zeros((5, 5)), np.zeros((5, 5)), Cpq)
    marg = Marginals.uniform(5, 5)
    a = fgm_solve(C, marg, SolverConfig(outer_iters=1, inner_iters=5000, epsilon=0.05)).gamma
    b = sinkhorn(Cpq, marg, SolverConfig(epsilon=0.05, tol=1e-13)).gamma
    assert np.abs(a - b).max() < 1e-8


def test_fgm_relabel_invariance():
    rng = np.random.default_rng(8)
    n = 7
    P = PointCloud(rng.uniform(size=(n, 3)), rng.normal(size=(n, 4)))
    Q = PointCloud(rng.uniform(size=(n, 3)), rng.normal(size=(n, 4)))
    perm = rng.permutation(n)
    marg = Marginals.uniform(n, n)
    cfg = SolverConfig(epsilon=2e-2)
    a = fgm_solve(fine_affinities(P, Q), marg, cfg).gamma
    b = fgm_solve(fine_affinities(P.subset(perm), Q), marg, cfg).gamma
    assert np.abs(b - a[perm]).max() < 1e-6


# -- oracle ------------------------------------------------------------------

def test_oracle_examples():
    marg = Marginals.uniform(2, 2)
    plan = exact_small_oracle(marg, cost=np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(plan.gamma, np.eye(2) / 2) and plan.objective_trace[0] == 0.0
    X = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 3.0, 0]])
    D = cdist(X, X)
    C = CostMatrices(D, D, np.zeros((3, 3)))
    q = exact_small_oracle(Marginals.uniform(3, 3), C=C)
    assert np.array_equal(q.gamma.argmax(1), np.arange(3))
    with pytest.raises(ValueError):
        exact_small_oracle(Marginals.uniform(9, 2), cost=np.zeros((9, 2)))


def test_oracle_partial_quadratic_matches_brute_force():
    rng = np.random.default_rng(9)
    C = fine_affinities(PointCloud(rng.uniform(size=(3, 3)), rng.normal(size=(3, 2))),
                        PointCloud(rng.uniform(size=(4, 3)), rng.normal(size=(4, 2))))
    marg = Marginals.uniform(3, 4, 0.5)
    best = exact_small_oracle(marg, C=C)
    import itertools
    vals = []
    for rows in itertools.combinations(range(3), 2):
        for cols in itertools.permutations(range(4), 2):
            G = np.zeros((3, 4))
            G[list(rows), list(cols)] = 0.25
            vals.append(gw_objective(C, G))
    assert best.objective_trace[0] == pytest.approx(min(vals))
