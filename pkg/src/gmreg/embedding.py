"""Forward pass of the geometric structure embedding and geometric attention.

Weights are supplied from outside (seeded random or loaded from file); there
is no training here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from ._random import check_random_state
from .geometry import PointCloud

DEFAULT_DIM = 32
DEFAULT_SIGMA_D = 0.2
DEFAULT_SIGMA_A = np.deg2rad(15.0)
DEFAULT_K = 3

_WEIGHT_NAMES = ("Wq", "Wk", "Wv", "Wg", "Wd", "Wa")


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wg: np.ndarray
    Wd: np.ndarray
    Wa: np.ndarray

    def __post_init__(self):
        b = None
        for name in _WEIGHT_NAMES:
            W = np.array(getattr(self, name), dtype=np.float64)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ValueError(f"{name} must be square, got {W.shape}")
            if b is None:
                b = W.shape[0]
            elif W.shape[0] != b:
                raise ValueError("all weight matrices must share the same dimension")
            if not np.all(np.isfinite(W)):
                raise ValueError(f"{name} has non-finite entries")
            W.flags.writeable = False
            object.__setattr__(self, name, W)

    @property
    def dim(self):
        return self.Wq.shape[0]

    @classmethod
    def random(cls, dim=DEFAULT_DIM, seed=0):
        """Uniform(-1/sqrt(b), 1/sqrt(b)) initialisation."""
        rng = check_random_state(seed)
        bound = 1.0 / np.sqrt(dim)
        return cls(**{n: rng.uniform(-bound, bound, (dim, dim)) for n in _WEIGHT_NAMES})

    @classmethod
    def zeros(cls, dim=DEFAULT_DIM):
        return cls(**{n: np.zeros((dim, dim)) for n in _WEIGHT_NAMES})

    def as_dict(self):
        return {n: getattr(self, n) for n in _WEIGHT_NAMES}


@dataclass(frozen=True, eq=False)
class GeometricEmbedding:
    r: np.ndarray  # (N, N, b)
    sigma_d: float
    sigma_a: float
    k_neighbors: int

    @property
    def n_points(self):
        return self.r.shape[0]


def sinusoidal_embed(x, b):
    """Transformer-style sinusoidal encoding of ``x`` (scalar or array) into ``b`` channels.

    Channel ``2t`` is ``sin(x / 10000**(2t/b))`` and channel ``2t+1`` the matching cosine.
    """
    if b < 2 or b % 2:
        raise ValueError(f"embedding dimension must be even and >= 2, got {b}")
    x = np.asarray(x, dtype=np.float64)
    freq = 10000.0 ** (-np.arange(0, b, 2) / b)
    arg = x[..., None] * freq
    out = np.empty(x.shape + (b,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def _knn_excluding_self(dist, k):
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def triplet_angles(points, k):
    """Angles ``angle(p_x - p_i, p_j - p_i)`` for the ``k`` nearest neighbours ``x`` of each ``i``.

    Returns an ``(N, N, k)`` array; entries with ``j == i`` are zero.
    """
    P = np.asarray(points, dtype=np.float64)
    diff = P[None, :, :] - P[:, None, :]  # diff[i, j] = p_j - p_i
    dist = np.linalg.norm(diff, axis=-1)
    nbrs = _knn_excluding_self(dist, k)
    anchor = np.take_along_axis(diff, nbrs[:, :, None], axis=1)  # (N, k, 3): p_x - p_i
    cross = np.cross(anchor[:, None, :, :], diff[:, :, None, :])
    dot = np.einsum("ixc,ijc->ijx", anchor, diff)
    return np.arctan2(np.linalg.norm(cross, axis=-1), dot), dist


def geometric_structure_embedding(cloud, weights, sigma_d=DEFAULT_SIGMA_D,
                                  sigma_a=DEFAULT_SIGMA_A, k=DEFAULT_K):
    """Pairwise distance + max-over-neighbours angle embedding projected by ``Wd``/``Wa``."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(points) < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} points, got {len(points)}")
    b = weights.dim
    angles, dist = triplet_angles(points, k)
    r_dist = sinusoidal_embed(dist / sigma_d, b) @ weights.Wd
    r_ang = (sinusoidal_embed(angles / sigma_a, b) @ weights.Wa).max(axis=2)
    return GeometricEmbedding(r_dist + r_ang, float(sigma_d), float(sigma_a), int(k))


def _attend(q, k, v):
    logits = (q @ k.T) / np.sqrt(q.shape[1])
    a = softmax(logits, axis=1)
    return a @ v, a


def geometric_self_attention(features, emb, weights, return_attention=False):
    X = np.asarray(features, dtype=np.float64)
    N, b = X.shape
    if emb.r.shape != (N, N, b) or weights.dim != b:
        raise ValueError(
            f"dimension mismatch: features {X.shape}, embedding {emb.r.shape}, weights b={weights.dim}"
        )
    q = X @ weights.Wq
    k = X @ weights.Wk
    rg = emb.r @ weights.Wg
    logits = (q @ k.T + np.einsum("ib,ijb->ij", q, rg)) / np.sqrt(b)
    a = softmax(logits, axis=1)
    z = a @ (X @ weights.Wv)
    return (z, a) if return_attention else z


def cross_attention(zP, zQ, weights, return_attention=False):
    zP = np.asarray(zP, dtype=np.float64)
    zQ = np.asarray(zQ, dtype=np.float64)
    if zP.ndim != 2 or zQ.ndim != 2 or zP.shape[1] != zQ.shape[1] or weights.dim != zP.shape[1]:
        raise ValueError(f"dimension mismatch: {zP.shape} vs {zQ.shape}, weights b={weights.dim}")
    z, a = _attend(zP @ weights.Wq, zQ @ weights.Wk, zQ @ weights.Wv)
    return (z, a) if return_attention else z


def interleaved_attention(FP, FQ, embP, embQ, weights):
    """Self, cross (both directions), self."""
    zP = geometric_self_attention(FP, embP, weights)
    zQ = geometric_self_attention(FQ, embQ, weights)
    zP, zQ = cross_attention(zP, zQ, weights), cross_attention(zQ, zP, weights)
    return geometric_self_attention(zP, embP, weights), geometric_self_attention(zQ, embQ, weights)
