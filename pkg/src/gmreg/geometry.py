"""Point clouds, rigid transforms, nearest-neighbour search and rigid fitting.

Everything here works in float64. Values are treated as immutable: arrays
stored on the dataclasses are marked read-only on construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_features, check_points, check_positive, check_unit_interval

ORTHO_TOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional per-point features and overlap scores."""

    points: np.ndarray
    features: np.ndarray | None = None
    overlap_scores: np.ndarray | None = None

    def __post_init__(self):
        pts = check_points(self.points)
        object.__setattr__(self, "points", _frozen(pts))
        if self.features is not None:
            F = check_features(self.features, len(pts))
            object.__setattr__(self, "features", _frozen(F))
        if self.overlap_scores is not None:
            o = check_unit_interval(self.overlap_scores, "overlap_scores")
            if len(o) != len(pts):
                raise ValueError("overlap_scores must have one entry per point")
            object.__setattr__(self, "overlap_scores", _frozen(o))

    def __len__(self):
        return len(self.points)

    def with_features(self, features):
        return PointCloud(self.points, features, self.overlap_scores)

    def with_overlap_scores(self, scores):
        return PointCloud(self.points, self.features, scores)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return PointCloud(
            self.points[idx],
            None if self.features is None else self.features[idx],
            None if self.overlap_scores is None else self.overlap_scores[idx],
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation in SO(3) followed by a translation (metres)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other):
        """``(A @ B)(x) == A(B(x))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index pairs ``(i into P, j into Q)`` with optional non-negative confidences."""

    pairs: np.ndarray
    confidences: np.ndarray | None = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(pairs < 0):
            raise ValueError("correspondence indices must be non-negative")
        if len(np.unique(pairs, axis=0)) != len(pairs):
            raise ValueError("duplicate correspondence pairs")
        pairs.flags.writeable = False
        object.__setattr__(self, "pairs", pairs)
        if self.confidences is not None:
            c = np.asarray(self.confidences, dtype=np.float64).ravel()
            if len(c) != len(pairs) or np.any(c < 0) or not np.all(np.isfinite(c)):
                raise ValueError("confidences must be finite, >= 0, one per pair")
            object.__setattr__(self, "confidences", _frozen(c))

    def __len__(self):
        return len(self.pairs)

    def check_bounds(self, n_p, n_q):
        if len(self.pairs) and (self.pairs[:, 0].max() >= n_p or self.pairs[:, 1].max() >= n_q):
            raise ValueError("correspondence index out of range")
        return self


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.features, cloud.overlap_scores)


def _exact_dist(queries, points, idx):
    diff = queries[:, None, :] - points[idx]
    return np.sqrt(np.sum(diff * diff, axis=-1))


class SpatialIndex:
    """kd-tree over 3D points with deterministic lowest-index tie breaking."""

    def __init__(self, points, n_candidates=8):
        self.points = check_points(points)
        if len(self.points) == 0:
            raise ValueError("empty cloud")
        self._tree = cKDTree(self.points)
        self.n_candidates = min(n_candidates, len(self.points))

    def query(self, queries):
        """Nearest neighbour of every query row; returns ``(indices, distances)``."""
        Xq = check_points(queries, "queries")
        if len(Xq) == 0:
            return np.empty(0, dtype=np.intp), np.empty(0)
        k = self.n_candidates
        _, cand = self._tree.query(Xq, k=k)
        cand = np.asarray(cand).reshape(len(Xq), k)
        d = _exact_dist(Xq, self.points, cand)
        # sort candidates by (distance, index) so ties resolve to the lowest index
        order = np.lexsort((cand, d), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        idx, dist = cand[:, 0].copy(), d[:, 0].copy()
        if k < len(self.points):
            # every candidate tied: more equidistant points may exist outside the k-set
            for r in np.flatnonzero(d[:, -1] == d[:, 0]):
                ball = np.asarray(self._tree.query_ball_point(Xq[r], dist[r] * (1 + 1e-9) + 1e-300))
                db = _exact_dist(Xq[r:r + 1], self.points, ball[None, :])[0]
                best = ball[db == db.min()].min()
                idx[r], dist[r] = best, db.min()
        return idx, dist

    def query_radius(self, queries, r):
        return self._tree.query_ball_point(check_points(queries, "queries"), r)


def nearest_neighbor_bruteforce(queries, points):
    """Exhaustive scan with the same tie rule; O(n) per query."""
    Xq = check_points(queries, "queries")
    X = check_points(points)
    if len(X) == 0:
        raise ValueError("empty cloud")
    idx = np.empty(len(Xq), dtype=np.intp)
    dist = np.empty(len(Xq))
    all_idx = np.arange(len(X))
    for r, q in enumerate(Xq):
        d = _exact_dist(q[None, :], X, all_idx[None, :])[0]
        idx[r] = np.argmin(d)  # argmin returns the first minimum
        dist[r] = d[idx[r]]
    return idx, dist


def nearest_neighbor(query, target: PointCloud):
    """Return ``(index, distance)`` of the point of ``target`` closest to ``query``."""
    if len(target) == 0:
        raise ValueError("empty cloud")
    idx, dist = SpatialIndex(target.points).query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(dist[0])


def _aligned_nn_distances(P, Q, T):
    if len(Q) == 0:
        raise ValueError("empty cloud")
    return SpatialIndex(Q.points).query(T.apply(P.points))[1]


def overlap_ratio(P: PointCloud, Q: PointCloud, T: RigidTransform, v: float) -> float:
    """Fraction of points of ``P`` whose aligned nearest neighbour in ``Q`` is within ``v``."""
    v = check_positive(v, "v")
    if len(P) == 0:
        raise ValueError("empty cloud")
    return float(np.mean(_aligned_nn_distances(P, Q, T) <= v))


def overlap_labels(P: PointCloud, Q: PointCloud, T: RigidTransform, eps_o: float) -> np.ndarray:
    """Binary overlap labels: 1 where the aligned NN distance is strictly below ``eps_o``."""
    eps_o = check_positive(eps_o, "eps_o")
    if len(Q) == 0:
        raise ValueError("empty cloud")
    if len(P) == 0:
        return np.zeros(0, dtype=np.int64)
    return (_aligned_nn_distances(P, Q, T) < eps_o).astype(np.int64)


def _proper_rotation(H):
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.swapaxes(-1, -2) @ U.swapaxes(-1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape[:-2] + (3, 3))
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    return Vt.swapaxes(-1, -2) @ D @ U.swapaxes(-1, -2)


def kabsch_fit(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform mapping ``src`` onto ``dst``."""
    src = check_points(src, "src")
    dst = check_points(dst, "dst")
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if len(w) != len(src) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, non-negative, one per pair")
    if np.count_nonzero(w) < 3:
        raise ValueError("degenerate fit")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[0] <= 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise ValueError("degenerate fit")
    R = _proper_rotation(H)
    return RigidTransform(R, mu_d - R @ mu_s)


def kabsch_batch(src, dst):
    """Unweighted Kabsch over a stack of minimal samples.

    ``src`` and ``dst`` have shape ``(B, k, 3)``. Returns ``(R, t, valid)``
    where ``valid`` flags non-degenerate samples.
    """
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    H = (src - mu_s).swapaxes(1, 2) @ (dst - mu_d)
    sv = np.linalg.svd(H, compute_uv=False)
    valid = (sv[:, 0] > 0.0) & (sv[:, 1] > 1e-12 * sv[:, 0])
    H = np.where(valid[:, None, None], H, np.eye(3))
    R = _proper_rotation(H)
    t = mu_d[:, 0, :] - np.einsum("bij,bj->bi", R, mu_s[:, 0, :])
    return R, t, valid


def random_rotation(rng):
    """Uniform rotation on SO(3) from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # re-orthonormalise so the 1e-9 invariant holds regardless of rounding
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def rotation_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
