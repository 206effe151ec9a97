import numpy as np
import pytest
from scipy.spatial import cKDTree

from gmreg.geometry import PointCloud, RigidTransform, overlap_ratio, random_rotation
from gmreg.synth import (
    SHAPES, SceneConfig, descriptor_raw, generate_pair, local_descriptor, oracle_features,
)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(shape="torus")
    with pytest.raises(ValueError):
        SceneConfig(overlap_target=0.0)
    with pytest.raises(ValueError):
        SceneConfig(noise_sigma=-1)
    with pytest.raises(ValueError):
        SceneConfig(n_points=10)
    with pytest.raises(ValueError):
        SceneConfig(crop_axis=(0, 0, 0))
    assert np.isclose(np.linalg.norm(SceneConfig(crop_axis=(3, 4, 0)).crop_axis), 1.0)


def test_full_overlap_noiseless_identity_correspondence():
    P, Q, gt, corr = generate_pair(SceneConfig(n_points=400, overlap_target=1.0, seed=1))
    assert len(P) == len(Q) == 400
    assert np.allclose(gt.apply(P.points), Q.points, atol=1e-12)
    assert np.array_equal(corr.pairs, np.c_[np.arange(400), np.arange(400)])


@pytest.mark.parametrize("shape", SHAPES)
def test_overlap_target_hit(shape):
    P, Q, gt, _ = generate_pair(SceneConfig(shape=shape, overlap_target=0.3, seed=4))
    assert 0.25 <= overlap_ratio(P, Q, gt, 0.05) <= 0.35


def test_overlap_on_100_configs():
    for seed in range(100):
        target = 0.2 + 0.6 * (seed % 7) / 6
        cfg = SceneConfig(n_points=600, shape=SHAPES[seed % 3], overlap_target=target,
                          noise_sigma=0.005 * (seed % 2), seed=seed)
        P, Q, gt, _ = generate_pair(cfg)
        assert abs(overlap_ratio(P, Q, gt, cfg.overlap_radius) - target) <= 0.05


def test_generate_pair_determinism_and_noise():
    cfg = SceneConfig(noise_sigma=0.01, seed=9)
    a, b = generate_pair(cfg), generate_pair(cfg)
    for x, y in zip(a[:2], b[:2]):
        assert np.array_equal(x.points, y.points)
    assert np.array_equal(a[2].as_matrix(), b[2].as_matrix())
    P, Q, gt, corr = a
    d = np.linalg.norm(gt.apply(P.points[corr.pairs[:, 0]]) - Q.points[corr.pairs[:, 1]], axis=1)
    assert len(corr) > 0 and d.max() <= 0.03


def test_unreachable_overlap_raises():
    # a single blob cannot be cropped to a 5% overlap with points that dense
    with pytest.raises(RuntimeError):
        generate_pair(SceneConfig(n_points=60, overlap_target=0.01, seed=0, overlap_radius=5.0))


def test_oracle_features_exact_and_identity_map():
    P, Q, gt, corr = generate_pair(SceneConfig(seed=3))
    Pf, Qf = oracle_features(P, Q, gt)
    assert np.allclose(Pf.features[corr.pairs[:, 0]], Qf.features[corr.pairs[:, 1]], atol=1e-12)
    _, j = cKDTree(Qf.features).query(Pf.features[corr.pairs[:, 0]])
    assert np.array_equal(j, corr.pairs[:, 1])
    P3, _ = oracle_features(P, Q, gt, dim=3, projection=np.eye(3))
    assert np.allclose(P3.features, gt.apply(P.points), atol=1e-12)
    with pytest.raises(ValueError):
        oracle_features(P, Q, gt, dim=2)


def test_oracle_features_with_noise_recovers_most():
    # feature scale: median nearest-neighbour distance between features
    for seed in range(3):
        P, Q, gt, corr = generate_pair(SceneConfig(seed=seed))
        _, Qf = oracle_features(P, Q, gt)
        d, _ = cKDTree(Qf.features).query(Qf.features, k=2)
        Pn, Qn = oracle_features(P, Q, gt, noise=0.1 * np.median(d[:, 1]), seed=seed)
        _, j = cKDTree(Qn.features).query(Pn.features[corr.pairs[:, 0]])
        assert np.mean(j == corr.pairs[:, 1]) >= 0.8


def test_descriptor_rigid_invariance():
    rng = np.random.default_rng(0)
    P, _, _, _ = generate_pair(SceneConfig(n_points=800, shape="box-room", seed=0))
    base = local_descriptor(P, 0.5).features
    for _ in range(3):
        T = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3))
        F = local_descriptor(PointCloud(T.apply(P.points)), 0.5).features
        assert np.abs(F - base).max() < 1e-6


def test_descriptor_plane_and_isolated():
    rng = np.random.default_rng(1)
    X = np.c_[rng.uniform(-1, 1, (400, 2)), np.zeros(400)]
    raw = descriptor_raw(X, 0.5)
    inner = np.all(np.abs(X[:, :2]) < 0.4, axis=1)
    assert np.all(raw[inner, 2] < 0.05 * raw[inner, 0])
    Y = np.vstack([X, [[50.0, 50.0, 50.0]]])
    assert not local_descriptor(Y, 0.5).features[-1].any()
    assert not descriptor_raw(Y, 0.5)[-1].any()
    with pytest.raises(ValueError):
        local_descriptor(X, 0.0)
