"""Correspondence sampling, RANSAC pose estimation and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from . import _kernels
from ._random import check_random_state, substream
from .affinity import DEFAULT_ALPHA, coarse_affinities
from .geometry import CorrespondenceSet, PointCloud, RigidTransform, SpatialIndex, kabsch_batch, kabsch_fit
from .losses import plan_scores
from .ot import Marginals, SolverConfig, pgm_proximal

INDOOR = "indoor"
KITTI = "kitti"
INDOOR_RMSE = 0.2
KITTI_RRE = 5.0
KITTI_RTE = 2.0
RANSAC_ITERS = 50000
INLIER_THRESH = {INDOOR: 0.05, KITTI: 0.30}
TEMPERATURE = 0.02
_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    correspondences: CorrespondenceSet
    inlier_mask: np.ndarray
    rre: float = float("nan")
    rte: float = float("nan")
    rr_flag: bool | None = None
    rmse: float = float("nan")

    def __post_init__(self):
        mask = np.asarray(self.inlier_mask, dtype=bool)
        if len(mask) != len(self.correspondences):
            raise ValueError("inlier_mask must have one entry per correspondence")
        object.__setattr__(self, "inlier_mask", mask)

    @property
    def n_inliers(self):
        return int(self.inlier_mask.sum())

    def with_metrics(self, rre, rte, rmse, rr_flag):
        return replace(self, rre=float(rre), rte=float(rte), rmse=float(rmse), rr_flag=bool(rr_flag))


def matching_matrix(FP, FQ, temperature=TEMPERATURE):
    """Row-softmax of cosine similarities divided by ``temperature``."""
    FP = np.asarray(FP, dtype=np.float64)
    FQ = np.asarray(FQ, dtype=np.float64)
    if FP.ndim != 2 or FQ.ndim != 2 or FP.shape[1] != FQ.shape[1]:
        raise ValueError(f"features must share their dimension, got {FP.shape} and {FQ.shape}")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")

    def unit(F):
        n = np.linalg.norm(F, axis=1, keepdims=True)
        return np.divide(F, n, out=np.zeros_like(F), where=n > 0)

    return softmax(unit(FP) @ unit(FQ).T / temperature, axis=1)


def confidence_sample(FP, FQ, OP, OQ, n_samples, seed=0, temperature=TEMPERATURE):
    """Draw ``n_samples`` distinct pairs with probability proportional to confidence.

    Confidence of ``(i, j)`` is ``match[i, j] * OP[i] * OQ[j]``. When fewer
    than ``n_samples`` pairs have non-zero confidence, all of them are returned.
    """
    if n_samples < 3:
        raise ValueError("n_samples must be >= 3")
    match = matching_matrix(FP, FQ, temperature)
    OP = np.asarray(OP, dtype=np.float64).ravel()
    OQ = np.asarray(OQ, dtype=np.float64).ravel()
    if OP.shape != (match.shape[0],) or OQ.shape != (match.shape[1],):
        raise ValueError("overlap scores must have one entry per point")
    conf = (match * OP[:, None] * OQ[None, :]).ravel()
    total = conf.sum()
    if not total > 0:
        raise ValueError("no confident correspondences")
    n = min(n_samples, int(np.count_nonzero(conf)))
    rng = check_random_state(seed)
    flat = rng.choice(conf.size, size=n, replace=False, p=conf / total)
    pairs = np.c_[np.divmod(flat, match.shape[1])]
    return CorrespondenceSet(pairs, conf[flat])


def _minimal_samples(rng, n, iters):
    """``(iters, 3)`` index triples; drawn in chunks so any prefix is iteration-count independent."""
    for start in range(0, iters, _CHUNK):
        yield rng.integers(0, n, (min(_CHUNK, iters - start), 3))


def ransac_register(corr, P, Q, inlier_thresh=INLIER_THRESH[INDOOR], iters=RANSAC_ITERS, seed=0):
    """Hypothesise-and-verify rigid estimation from putative correspondences.

    Keeps the hypothesis with the most inliers (ties: lower inlier RMSE, then
    the earlier iteration) and refits on its inlier set.
    """
    if len(corr) < 3:
        raise ValueError("need at least 3 correspondences")
    P_pts = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=np.float64)
    Q_pts = Q.points if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    corr.check_bounds(len(P_pts), len(Q_pts))
    src = P_pts[corr.pairs[:, 0]]
    dst = Q_pts[corr.pairs[:, 1]]
    rng = check_random_state(seed)
    best = (-1, np.inf)
    best_Rt = None
    for idx in _minimal_samples(rng, len(src), iters):
        distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
        R, t, valid = kabsch_batch(src[idx], dst[idx])
        valid &= distinct
        if not valid.any():
            continue
        R, t = R[valid], t[valid]
        count, sse = _kernels.score_hypotheses(R, t, src, dst, float(inlier_thresh))
        with np.errstate(invalid="ignore", divide="ignore"):
            rmse = np.where(count > 0, np.sqrt(sse / count), np.inf)
        k = np.lexsort((rmse, -count))[0]  # stable: earliest among exact ties
        if (count[k], -rmse[k]) > (best[0], -best[1]):
            best = (int(count[k]), float(rmse[k]))
            best_Rt = (R[k], t[k])
    if best_Rt is None:
        raise RuntimeError("no valid hypothesis")
    T = RigidTransform(*best_Rt)
    mask = np.linalg.norm(T.apply(src) - dst, axis=1) <= inlier_thresh
    if mask.sum() >= 3:
        try:
            refit = kabsch_fit(src[mask], dst[mask])
        except ValueError:
            refit = None
        if refit is not None:
            T = refit
            mask = np.linalg.norm(T.apply(src) - dst, axis=1) <= inlier_thresh
    return RegistrationResult(T, corr, mask)


def rotation_error_deg(R_est, R_gt):
    """Geodesic angle ``arccos((tr(R_est^T R_gt) - 1) / 2)`` in degrees.

    Evaluated as ``atan2(sin, cos)`` with the sine taken from the skew part,
    which keeps full precision for tiny angles where ``arccos`` does not.
    """
    Ra = np.asarray(R_est).T @ np.asarray(R_gt)
    c = np.clip((np.trace(Ra) - 1.0) / 2.0, -1.0, 1.0)
    s = np.linalg.norm(Ra - Ra.T) / (2.0 * np.sqrt(2.0))
    return float(np.degrees(np.arctan2(s, c)))


def compute_metrics(est, gt, gt_corr=None, P=None, Q=None, mode=INDOOR):
    """Return ``(rre_deg, rte_m, rmse_m, rr_flag)``.

    ``rmse`` is taken over the ground-truth pairs ``(p, q)`` as
    ``||est(p) - q||``; it needs ``gt_corr`` with ``P`` and ``Q`` and is NaN
    otherwise. Indoor recall requires it; KITTI recall uses RRE and RTE.
    """
    if mode not in (INDOOR, KITTI):
        raise ValueError(f"unknown mode {mode!r}")
    rre = rotation_error_deg(est.rotation, gt.rotation)
    rte = float(np.linalg.norm(est.translation - gt.translation))
    rmse = float("nan")
    if gt_corr is not None and P is not None and Q is not None and len(gt_corr):
        P_pts = P.points if isinstance(P, PointCloud) else np.asarray(P)
        Q_pts = Q.points if isinstance(Q, PointCloud) else np.asarray(Q)
        d = est.apply(P_pts[gt_corr.pairs[:, 0]]) - Q_pts[gt_corr.pairs[:, 1]]
        rmse = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    if mode == INDOOR:
        if np.isnan(rmse):
            raise ValueError("indoor recall needs ground-truth correspondences with P and Q")
        rr = rmse < INDOOR_RMSE
    else:
        rr = rre < KITTI_RRE and rte < KITTI_RTE
    return rre, rte, rmse, bool(rr)


# -- full pipeline -----------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of :func:`register`; every random step derives from ``seed``."""

    n_super: int = 128
    overlap_mass: float = 0.3
    alpha: float = DEFAULT_ALPHA
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_samples: int = 1000
    temperature: float = TEMPERATURE
    inlier_thresh: float = INLIER_THRESH[INDOOR]
    iters: int = RANSAC_ITERS
    seed: int = 0


def estimate_overlap_mass(overlap, threshold=0.1):
    """Transport mass ``s`` from super-point patch overlaps.

    Counts the pairs whose patch overlap exceeds ``threshold`` and divides by
    the larger side, so ``s`` is the share of pair masses ``1 / max(N, M)``
    the plan should move. Clipped to ``(0, 1]``.
    """
    overlap = np.asarray(overlap, dtype=np.float64)
    if overlap.ndim != 2 or overlap.size == 0:
        raise ValueError("overlap must be a non-empty matrix")
    s = np.count_nonzero(overlap > threshold) / max(overlap.shape)
    return float(np.clip(s, 1.0 / max(overlap.shape), 1.0))


def farthest_point_sampling(points, k, seed=0):
    """Greedy farthest-point subset of size ``k`` from a seeded start."""
    X = np.asarray(points, dtype=np.float64)
    k = min(k, len(X))
    rng = check_random_state(seed)
    idx = np.empty(k, dtype=np.intp)
    idx[0] = rng.integers(len(X))
    d = np.linalg.norm(X - X[idx[0]], axis=1)
    for s in range(1, k):
        idx[s] = int(np.argmax(d))
        d = np.minimum(d, np.linalg.norm(X - X[idx[s]], axis=1))
    return idx


def predict_overlap(P, Q, cfg):
    """Overlap scores for every point from the partial matching of super points.

    Super points get the row/column mass of the ``pgm_proximal`` plan divided
    by its cap; each point inherits the score of its nearest super point.
    """
    iP = farthest_point_sampling(P.points, cfg.n_super, substream(cfg.seed, "superpoints-P"))
    iQ = farthest_point_sampling(Q.points, cfg.n_super, substream(cfg.seed, "superpoints-Q"))
    Phat = P.subset(iP).with_overlap_scores(np.ones(len(iP)))
    Qhat = Q.subset(iQ).with_overlap_scores(np.ones(len(iQ)))
    marg = Marginals.uniform(len(iP), len(iQ), min(cfg.overlap_mass, 1.0))
    plan = pgm_proximal(coarse_affinities(Phat, Qhat, cfg.alpha), marg, cfg.solver)
    sP, sQ = plan_scores(plan.gamma, marg)
    nP, _ = SpatialIndex(Phat.points).query(P.points)
    nQ, _ = SpatialIndex(Qhat.points).query(Q.points)
    return sP[nP], sQ[nQ], plan


def register(P, Q, cfg=None):
    """Affinities, partial matching, confidence sampling and RANSAC.

    ``P`` and ``Q`` must carry features. Returns a :class:`RegistrationResult`
    without metrics; see :func:`compute_metrics`.
    """
    cfg = cfg or PipelineConfig()
    if P.features is None or Q.features is None:
        raise ValueError("both clouds need features")
    oP, oQ, _ = predict_overlap(P, Q, cfg)
    corr = confidence_sample(P.features, Q.features, oP, oQ, cfg.n_samples,
                             substream(cfg.seed, "sampler"), cfg.temperature)
    return ransac_register(corr, P, Q, cfg.inlier_thresh, cfg.iters, substream(cfg.seed, "ransac"))
