import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmreg.affinity import (
    DEFAULT_ALPHA, CostMatrices, coarse_affinities, fine_affinities, gw_linearized_cost, gw_objective,
)
from gmreg.geometry import PointCloud


def brute_linearized(C, G):
    N, M = G.shape
    L = np.zeros((N, M))
    for j in range(N):
        for jp in range(M):
            for i in range(N):
                for ip in range(M):
                    L[j, jp] += 0.5 * (C.Cp[i, j] - C.Cq[ip, jp]) ** 2 * G[i, ip]
    return L


def cloud(rng, n, b=4, scores=True):
    return PointCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, b)),
                      rng.uniform(size=n) if scores else None)


def test_cost_matrices_validation():
    with pytest.raises(ValueError):
        CostMatrices(np.array([[0, 1], [2, 0.0]]), np.zeros((1, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        CostMatrices(np.eye(2), np.zeros((1, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        CostMatrices(np.zeros((2, 2)), np.zeros((1, 1)), -np.ones((2, 1)))
    with pytest.raises(ValueError):
        CostMatrices(np.zeros((2, 2)), np.zeros((1, 1)), np.zeros((1, 2)))


def test_coarse_examples(rng):
    P = PointCloud(rng.normal(size=(5, 3)), np.ones((5, 4)), np.zeros(5))
    assert not coarse_affinities(P, P, 0.5).Cp.any()
    P = cloud(rng, 5)
    C = coarse_affinities(P, P, 0.0)
    D = np.linalg.norm(P.features[:, None] - P.features[None], axis=-1)
    assert np.allclose(C.Cp, D, atol=1e-12)
    with pytest.raises(ValueError):
        coarse_affinities(PointCloud(P.points, P.features), P)
    with pytest.raises(ValueError):
        coarse_affinities(PointCloud(P.points, None, P.overlap_scores), P)


def test_coarse_hand_computed():
    pts = np.array([[0.0, 0, 0], [3.0, 4, 0], [0, 0, 1.0]])
    F = np.array([[0.0, 0], [1.0, 0], [0, 2.0]])
    o = np.array([1.0, 0.5, 0.0])
    P = PointCloud(pts, F, o)
    Q = PointCloud(pts[:2], F[:2], o[:2])
    C = coarse_affinities(P, Q, alpha=0.1)
    assert C.Cp[0, 1] == pytest.approx(1.0 + 1.0 * 0.5 * 0.1 * 5.0)
    assert C.Cp[0, 2] == pytest.approx(2.0)
    assert C.Cp[1, 2] == pytest.approx(np.sqrt(5.0))
    assert C.Cpq[2, 1] == pytest.approx(np.sqrt(5.0))
    assert C.Cq.shape == (2, 2)


def test_fine_examples(rng):
    P = cloud(rng, 6, scores=False)
    C = fine_affinities(P, P)
    assert np.allclose(np.diag(C.Cpq), 0)
    assert C.alpha == DEFAULT_ALPHA == 0.01
    s = 3.0
    Ps = PointCloud(P.points * s, P.features)
    g1 = fine_affinities(P, P, 1.0).Cp - fine_affinities(P, P, 0.0).Cp
    g2 = fine_affinities(Ps, Ps, 1.0).Cp - fine_affinities(Ps, Ps, 0.0).Cp
    assert np.allclose(g2, s * g1, atol=1e-12)
    with pytest.raises(ValueError):
        fine_affinities(PointCloud(P.points), P)


def test_coarse_equals_fine_with_unit_scores(rng):
    P, Q = cloud(rng, 6), cloud(rng, 5)
    Pc, Qc = P.with_overlap_scores(np.ones(6)), Q.with_overlap_scores(np.ones(5))
    a, b = coarse_affinities(Pc, Qc, 0.3), fine_affinities(P, Q, 0.3)
    for x, y in ((a.Cp, b.Cp), (a.Cq, b.Cq), (a.Cpq, b.Cpq)):
        assert np.array_equal(x, y)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 8))
def test_linearized_matches_quadruple_loop(seed, N, M):
    rng = np.random.default_rng(seed)
    P, Q = cloud(rng, N), cloud(rng, M)
    C = coarse_affinities(P, Q, 0.5)
    assert np.allclose(C.Cp, C.Cp.T, atol=0) and not np.diag(C.Cp).any()
    G = rng.uniform(size=(N, M))
    assert np.abs(gw_linearized_cost(C, G) - brute_linearized(C, G)).max() < 1e-10


def test_linearized_zero_cases(rng):
    P, Q = cloud(rng, 3), cloud(rng, 4)
    C = coarse_affinities(P, Q)
    assert not gw_linearized_cost(C, np.zeros((3, 4))).any()
    Z = CostMatrices(np.zeros((3, 3)), np.zeros((4, 4)), C.Cpq)
    assert not gw_linearized_cost(Z, rng.uniform(size=(3, 4))).any()
    with pytest.raises(ValueError):
        gw_linearized_cost(C, np.zeros((4, 3)))


def test_objective_definition(rng):
    P, Q = cloud(rng, 4), cloud(rng, 4)
    C = fine_affinities(P, Q)
    G = rng.uniform(size=(4, 4))
    expect = np.sum(C.Cpq * G) + np.sum(brute_linearized(C, G) * G)
    assert gw_objective(C, G) == pytest.approx(expect, rel=1e-12)
