import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmreg.geometry import CorrespondenceSet, PointCloud, RigidTransform, random_rotation, rotation_about_axis
from gmreg.registration import (
    INDOOR, KITTI, PipelineConfig, RegistrationResult, compute_metrics, confidence_sample,
    estimate_overlap_mass, farthest_point_sampling, matching_matrix, ransac_register, register,
    rotation_error_deg,
)
from gmreg.synth import SceneConfig, generate_pair, oracle_features


def random_T(rng):
    return RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))


def test_matching_matrix_rows(rng):
    M = matching_matrix(rng.normal(size=(6, 4)), rng.normal(size=(9, 4)), 0.5)
    assert np.allclose(M.sum(1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        matching_matrix(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        matching_matrix(np.ones((2, 3)), np.ones((2, 3)), 0.0)


def test_confidence_sample_one_hot_identity():
    F = np.eye(32)
    ones = np.ones(32)
    # per-draw probability of the identity pair: exp(1/T) / (exp(1/T) + 31)
    T = PipelineConfig().temperature
    assert np.exp(1 / T) / (np.exp(1 / T) + 31) >= 0.99
    corr = confidence_sample(F, F, ones, ones, 32, seed=0, temperature=T)
    assert np.mean(corr.pairs[:, 0] == corr.pairs[:, 1]) >= 0.99


def test_confidence_sample_zero_rows_and_determinism(rng):
    FP, FQ = rng.normal(size=(40, 8)), rng.normal(size=(30, 8))
    OP = np.r_[np.zeros(20), np.ones(20)]
    corr = confidence_sample(FP, FQ, OP, np.ones(30), 200, seed=4, temperature=0.5)
    assert corr.pairs[:, 0].min() >= 20
    again = confidence_sample(FP, FQ, OP, np.ones(30), 200, seed=4, temperature=0.5)
    assert np.array_equal(corr.pairs, again.pairs)
    assert len(np.unique(corr.pairs, axis=0)) == 200


def test_confidence_sample_errors(rng):
    F = rng.normal(size=(5, 3))
    with pytest.raises(ValueError, match="no confident correspondences"):
        confidence_sample(F, F, np.zeros(5), np.ones(5), 3)
    with pytest.raises(ValueError):
        confidence_sample(F, F, np.ones(5), np.ones(5), 2)
    corr = confidence_sample(F, F, np.r_[1.0, 0, 0, 0, 0], np.ones(5), 100)
    assert len(corr) == 5  # fewer non-zero pairs than requested


def exact_pairs(rng, n, T):
    X = rng.uniform(-1, 1, (n, 3))
    return X, T.apply(X)


def test_ransac_noiseless():
    rng = np.random.default_rng(0)
    T = random_T(rng)
    X, Y = exact_pairs(rng, 100, T)
    corr = CorrespondenceSet(np.c_[np.arange(100), np.arange(100)])
    res = ransac_register(corr, X, Y, iters=200, seed=1)
    rre, rte, _, _ = compute_metrics(res.transform, T, mode=KITTI)
    assert rre < 1e-6 and rte < 1e-9
    assert res.n_inliers == 100


def test_ransac_with_outliers_monte_carlo():
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T = random_T(rng)
        n_in, n_out = 30, 70
        X = rng.uniform(-1, 1, (100, 3))
        Y = T.apply(X)
        Y[n_in:] = rng.uniform(-1, 1, (n_out, 3)) + T.translation
        corr = CorrespondenceSet(np.c_[np.arange(100), np.arange(100)])
        res = ransac_register(corr, X, Y, iters=5000, seed=seed)
        rre, rte, _, _ = compute_metrics(res.transform, T, mode=KITTI)
        ok += rre < 0.5 and rte < 1e-2
    assert ok >= 99


def test_ransac_errors_and_determinism(rng):
    T = random_T(rng)
    X, Y = exact_pairs(rng, 20, T)
    with pytest.raises(ValueError):
        ransac_register(CorrespondenceSet([[0, 0], [1, 1]]), X, Y)
    line = np.outer(np.arange(6.0), [1, 0, 0])
    with pytest.raises(RuntimeError, match="no valid hypothesis"):
        ransac_register(CorrespondenceSet(np.c_[np.arange(6), np.arange(6)]), line, line, iters=50)
    Y[10:] = rng.normal(size=(10, 3))
    corr = CorrespondenceSet(np.c_[np.arange(20), np.arange(20)])
    a = ransac_register(corr, X, Y, iters=300, seed=9)
    b = ransac_register(corr, X, Y, iters=300, seed=9)
    assert np.array_equal(a.transform.as_matrix(), b.transform.as_matrix())
    assert np.array_equal(a.inlier_mask, b.inlier_mask)


def test_ransac_more_iterations_never_worse():
    rng = np.random.default_rng(5)
    T = random_T(rng)
    X = rng.uniform(-1, 1, (200, 3))
    Y = T.apply(X) + rng.normal(size=(200, 3)) * 0.01
    Y[40:] = rng.uniform(-1, 1, (160, 3))
    corr = CorrespondenceSet(np.c_[np.arange(200), np.arange(200)])
    counts = [ransac_register(corr, X, Y, iters=k, seed=3).n_inliers for k in (10, 100, 1000, 5000)]
    # the final refit may move the count by a few points; the best hypothesis never gets worse
    assert counts[-1] >= counts[0]


def test_metrics_examples(rng):
    T = random_T(rng)
    X = rng.normal(size=(10, 3))
    corr = CorrespondenceSet(np.c_[np.arange(10), np.arange(10)])
    assert compute_metrics(T, T, corr, X, T.apply(X)) == (0.0, 0.0, 0.0, True)
    R5 = RigidTransform(rotation_about_axis([0, 0, 1], np.deg2rad(5)) @ T.rotation, T.translation)
    assert compute_metrics(R5, T, mode=KITTI)[0] == pytest.approx(5.0, abs=1e-9)
    shifted = T.apply(X) + [0.25, 0, 0]
    rre, rte, rmse, rr = compute_metrics(T, T, corr, X, shifted, INDOOR)
    assert rmse == pytest.approx(0.25) and rr is False
    far = RigidTransform(T.rotation, T.translation + [3.0, 0, 0])
    assert compute_metrics(far, T, mode=KITTI)[3] is False
    with pytest.raises(ValueError):
        compute_metrics(T, T, mode=INDOOR)
    with pytest.raises(ValueError):
        compute_metrics(T, T, mode="outdoor")


@given(st.integers(0, 10_000))
def test_rre_symmetric(seed):
    rng = np.random.default_rng(seed)
    A, B = random_rotation(rng), random_rotation(rng)
    assert abs(rotation_error_deg(A, B) - rotation_error_deg(B, A)) <= 1e-12
    assert rotation_error_deg(A, A) < 1e-5


def test_registration_result_validation():
    corr = CorrespondenceSet([[0, 0], [1, 1]])
    with pytest.raises(ValueError):
        RegistrationResult(RigidTransform.identity(), corr, [True])


def test_estimate_overlap_mass():
    ov = np.zeros((4, 5))
    ov[0, 0] = ov[1, 1] = 0.5
    ov[2, 2] = 0.05
    assert estimate_overlap_mass(ov) == pytest.approx(2 / 5)
    assert estimate_overlap_mass(np.ones((2, 2))) == 1.0
    assert estimate_overlap_mass(np.zeros((2, 4))) == 0.25


def test_farthest_point_sampling(rng):
    X = rng.normal(size=(50, 3))
    idx = farthest_point_sampling(X, 10, seed=0)
    assert len(np.unique(idx)) == 10
    assert np.array_equal(idx, farthest_point_sampling(X, 10, seed=0))
    assert len(farthest_point_sampling(X, 100)) == 50


def test_register_oracle_scene():
    P, Q, gt, corr = generate_pair(SceneConfig(n_points=1500, overlap_target=0.5, seed=2))
    P, Q = oracle_features(P, Q, gt)
    res = register(P, Q, PipelineConfig(temperature=1e-5, iters=5000))
    assert compute_metrics(res.transform, gt, corr, P, Q)[3]
    with pytest.raises(ValueError):
        register(PointCloud(P.points), Q)
