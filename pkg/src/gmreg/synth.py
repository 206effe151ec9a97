"""Synthetic partial-overlap scene pairs with exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._random import substream
from .geometry import CorrespondenceSet, PointCloud, RigidTransform, overlap_ratio, random_rotation

SHAPES = ("gaussian-blobs", "box-room", "sinusoidal-terrain")
OVERLAP_RADIUS = 0.05
OVERLAP_TOL = 0.05
BISECTION_STEPS = 50


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 2000
    shape: str = "gaussian-blobs"
    overlap_target: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0
    crop_axis: tuple = (1.0, 0.0, 0.0)
    overlap_radius: float = OVERLAP_RADIUS

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if not 0 < self.overlap_target <= 1:
            raise ValueError("overlap_target must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_points < 50:
            raise ValueError("n_points must be >= 50")
        axis = np.asarray(self.crop_axis, dtype=np.float64)
        if axis.shape != (3,) or not np.linalg.norm(axis) > 0:
            raise ValueError("crop_axis must be a non-zero 3-vector")
        object.__setattr__(self, "crop_axis", tuple(float(a) for a in axis / np.linalg.norm(axis)))


def _gaussian_blobs(n, rng):
    k = 8
    centers = rng.uniform(-1.0, 1.0, (k, 3))
    label = rng.integers(0, k, n)
    out = np.empty((n, 3))
    for c in range(k):
        R = random_rotation(rng)
        scale = rng.uniform(0.05, 0.3, 3)
        idx = np.flatnonzero(label == c)
        out[idx] = centers[c] + (rng.normal(size=(len(idx), 3)) * scale) @ R.T
    return out


def _box_surface(n, lo, hi, rng, faces=range(6)):
    """Uniform samples on the selected faces of an axis-aligned box."""
    size = hi - lo
    faces = list(faces)
    areas = np.array([size[(f // 2 + 1) % 3] * size[(f // 2 + 2) % 3] for f in faces])
    which = rng.choice(len(faces), n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * size
    for k, f in enumerate(faces):
        sel = which == k
        pts[sel, f // 2] = hi[f // 2] if f % 2 else lo[f // 2]
    return pts


def _box_room(n, rng):
    lo, hi = np.array([-2.0, -1.5, 0.0]), np.array([2.0, 1.5, 2.5])
    n_room = n // 3
    parts = [_box_surface(n_room, lo, hi, rng, faces=(0, 1, 2, 3, 4))]  # no ceiling
    n_boxes = 10
    sizes = rng.uniform(0.3, 1.0, (n_boxes, 3))
    counts = np.diff(np.linspace(0, n - n_room, n_boxes + 1).astype(int))
    for s, c in zip(sizes, counts):
        base = np.r_[rng.uniform(lo[:2] + s[:2] / 2, hi[:2] - s[:2] / 2), 0.0]
        blo = base - np.r_[s[:2] / 2, 0.0]
        parts.append(_box_surface(c, blo, blo + s, rng, faces=(0, 1, 2, 3, 5)))
    return np.vstack(parts)


def _terrain(n, rng):
    xy = rng.uniform(-2.0, 2.0, (n, 2))
    z = np.zeros(n)
    for k in range(1, 5):
        w = rng.normal(size=2) * k
        z += rng.uniform(0.1, 0.4) / k * np.sin(xy @ w + rng.uniform(0, 2 * np.pi))
    return np.c_[xy, z]


_SAMPLERS = {"gaussian-blobs": _gaussian_blobs, "box-room": _box_room, "sinusoidal-terrain": _terrain}


def sample_shape(shape, n, rng):
    return _SAMPLERS[shape](n, rng)


def _mutual_nn(A, B, radius):
    dA, iA = cKDTree(B).query(A)
    _, iB = cKDTree(A).query(B)
    keep = (iB[iA] == np.arange(len(A))) & (dA <= radius)
    rows = np.flatnonzero(keep)
    return np.c_[rows, iA[rows]]


def generate_pair(cfg: SceneConfig):
    """Return ``(P, Q, gt, gt_corr)`` with ``Q ~ gt(P)`` on the overlap region.

    Both clouds come from one base cloud cropped by half-spaces along
    ``cfg.crop_axis``; the slab they share is widened by bisection until the
    overlap ratio of ``P`` is within 0.05 of the target.
    """
    rng = substream(cfg.seed, "generator")
    X = sample_shape(cfg.shape, cfg.n_points, rng)
    R = random_rotation(rng)
    gt = RigidTransform(R, rng.uniform(-1.0, 1.0, 3))
    noise_P = rng.normal(size=X.shape) * cfg.noise_sigma
    noise_Q = rng.normal(size=X.shape) * cfg.noise_sigma

    proj = X @ np.asarray(cfg.crop_axis)
    c = np.median(proj)
    w_max = np.abs(proj - c).max() * (1 + 1e-9)
    XQ = gt.apply(X)

    def crop(w):
        iP = np.flatnonzero(proj <= c + w)
        iQ = np.flatnonzero(proj >= c - w)
        P = PointCloud(X[iP] + noise_P[iP])
        Q = PointCloud(XQ[iQ] + noise_Q[iQ])
        return P, Q, overlap_ratio(P, Q, gt, cfg.overlap_radius)

    target = cfg.overlap_target
    lo, hi = 0.0, w_max
    best = crop(hi)
    if best[2] < target - OVERLAP_TOL:
        raise RuntimeError(f"crop search cannot reach overlap {target}; full overlap is {best[2]:.3f}")
    if abs(best[2] - target) > 1e-3:
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            cand = crop(mid)
            if abs(cand[2] - target) < abs(best[2] - target):
                best = cand
            if abs(cand[2] - target) <= 1e-3:
                break
            lo, hi = (mid, hi) if cand[2] < target else (lo, mid)
    P, Q, ratio = best
    if abs(ratio - target) > OVERLAP_TOL:
        raise RuntimeError(f"crop search failed to bracket overlap {target} (got {ratio:.3f})")
    radius = max(3.0 * cfg.noise_sigma, 1e-6)
    corr = CorrespondenceSet(_mutual_nn(gt.apply(P.points), Q.points, radius))
    return P, Q, gt, corr


def _orthonormal_map(dim, n_in, seed, name):
    rng = substream(seed, name)
    if dim >= n_in:
        A, _ = np.linalg.qr(rng.normal(size=(dim, n_in)))
        return A.T  # (n_in, dim) with orthonormal rows
    return rng.normal(size=(n_in, dim)) / np.sqrt(dim)


def oracle_features(P, Q, gt, dim=32, noise=0.0, seed=0, projection=None):
    """Features from ground-truth-aligned coordinates.

    A P point gets ``gt(p) @ A`` (plus Gaussian noise of std ``noise``), a Q
    point gets ``q @ A``. ``A`` is a fixed seeded ``3 x dim`` map with
    orthonormal rows, so feature distances equal aligned distances.
    """
    if dim < 3:
        raise ValueError("dim must be >= 3")
    A = _orthonormal_map(dim, 3, seed, "oracle-features") if projection is None else np.asarray(projection)
    if A.shape != (3, dim):
        raise ValueError(f"projection must have shape (3, {dim})")
    FP = gt.apply(P.points) @ A
    if noise > 0:
        FP = FP + substream(seed, "oracle-noise").normal(size=FP.shape) * noise
    return P.with_features(FP), Q.with_features(Q.points @ A)


DESCRIPTOR_BINS = 8


def descriptor_raw(points, radius, n_bins=DESCRIPTOR_BINS):
    """Rigid-invariant per-point statistics of the radius neighbourhood.

    Columns: covariance eigenvalues (descending) divided by ``radius**2``,
    ``log(1 + neighbour count)``, and the normalised histogram of neighbour
    distances over ``n_bins`` equal bins of ``[0, radius]``. Points without
    neighbours get a zero row.
    """
    X = np.asarray(points, dtype=np.float64)
    tree = cKDTree(X)
    nbrs = tree.query_ball_point(X, radius)
    out = np.zeros((len(X), 4 + n_bins))
    for i, idx in enumerate(nbrs):
        idx = [j for j in idx if j != i]
        if not idx:
            continue
        N = X[idx]
        d = np.linalg.norm(N - X[i], axis=1)
        Z = np.vstack([N, X[i]])
        ev = np.linalg.eigvalsh(np.cov(Z.T, bias=True))[::-1]
        out[i, :3] = np.maximum(ev, 0.0) / radius**2
        out[i, 3] = np.log1p(len(idx))
        hist = np.bincount(np.minimum((d / radius * n_bins).astype(int), n_bins - 1), minlength=n_bins)
        out[i, 4:] = hist / len(idx)
    return out


DESCRIPTOR_SCALES = (0.3, 0.6, 1.0)


def local_descriptor(cloud, radius=0.5, dim=32, n_bins=DESCRIPTOR_BINS, seed=0):
    """Handcrafted rigid-invariant descriptor projected to ``dim`` channels.

    :func:`descriptor_raw` is evaluated at ``radius`` times each of
    ``DESCRIPTOR_SCALES``; the columns are standardised over the cloud and
    mapped by a fixed seeded projection. Points with no neighbour within
    ``radius`` get a zero descriptor.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    raw = np.hstack([descriptor_raw(points, radius * f, n_bins) for f in DESCRIPTOR_SCALES])
    isolated = ~raw[:, -(4 + n_bins):].any(axis=1)
    if len(raw) > 1:
        sd = raw.std(axis=0)
        raw = (raw - raw.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    F = raw @ _orthonormal_map(dim, raw.shape[1], seed, "descriptor")
    F[isolated] = 0.0
    if isinstance(cloud, PointCloud):
        return cloud.with_features(F)
    return PointCloud(points, F)
