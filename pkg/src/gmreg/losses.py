"""Training losses with analytic gradients and a finite-difference verifier.

Only the loss inputs (features, scores) are differentiated; plans are
treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax
from scipy.spatial import cKDTree

from ._random import check_random_state

GAMMA = 10.0
DELTA_P = 0.1
DELTA_N = 1.4
LAMBDA_C = 1.0
LAMBDA_F = 1.0
CLAMP = 1e-7
N_ANCHORS = 128


@dataclass(frozen=True)
class LossValue:
    value: float
    gradients: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError("loss value is not finite")
        for k, g in self.gradients.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"gradient {k!r} is not finite")


# -- circle loss -------------------------------------------------------------

def circle_anchor_term(d_pos, lam_pos, d_neg, gamma=GAMMA, delta_p=DELTA_P, delta_n=DELTA_N):
    """``log(1 + sum_pos exp(lam*gamma*(d - delta_p)) + sum_neg exp(gamma*(delta_n - d)))``."""
    d_pos = np.asarray(d_pos, dtype=np.float64)
    lam_pos = np.broadcast_to(np.asarray(lam_pos, dtype=np.float64), d_pos.shape)
    d_neg = np.asarray(d_neg, dtype=np.float64)
    z = np.concatenate([[0.0], lam_pos * gamma * (d_pos - delta_p), gamma * (delta_n - d_neg)])
    return float(logsumexp(z))


def _circle_direction(FA, FB, pos, neg, lam, anchors, gamma, delta_p, delta_n):
    """Mean anchor term over ``anchors`` (rows of FA) and its gradients."""
    gA = np.zeros_like(FA)
    gB = np.zeros_like(FB)
    if len(anchors) == 0:
        return 0.0, gA, gB
    diff = FA[anchors, None, :] - FB[None, :, :]
    D = np.linalg.norm(diff, axis=-1)
    P, Nm, L = pos[anchors], neg[anchors], lam[anchors]
    zp = np.where(P, L * gamma * (D - delta_p), -np.inf)
    zn = np.where(Nm, gamma * (delta_n - D), -np.inf)
    z = np.concatenate([np.zeros((len(anchors), 1)), zp, zn], axis=1)
    value = logsumexp(z, axis=1).mean()
    w = softmax(z, axis=1)
    M = FB.shape[0]
    wp, wn = w[:, 1:M + 1], w[:, M + 1:]
    dD = (np.where(P, wp * L * gamma, 0.0) - np.where(Nm, wn * gamma, 0.0)) / len(anchors)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(D[..., None] > 0, diff / D[..., None], 0.0)
    contrib = dD[..., None] * unit
    np.add.at(gA, anchors, contrib.sum(axis=1))
    gB -= contrib.sum(axis=0)
    return float(value), gA, gB


def _pick_anchors(has_pos, n_anchors, rng):
    idx = np.flatnonzero(has_pos)
    if len(idx) > n_anchors:
        idx = np.sort(rng.choice(idx, n_anchors, replace=False))
    return idx


def circle_loss(FP, FQ, pos, neg, overlap=None, *, gamma=GAMMA, delta_p=DELTA_P,
                delta_n=DELTA_N, n_anchors=N_ANCHORS, seed=0):
    """Symmetric overlap-aware circle loss on super-point features.

    ``pos``/``neg`` are boolean ``N x M`` masks of positive and negative
    pairs; ``overlap`` holds the patch overlap ratios that scale the positive
    exponents. Anchors without positives are excluded; at most ``n_anchors``
    anchors per side are drawn (seeded).
    """
    FP = np.asarray(FP, dtype=np.float64)
    FQ = np.asarray(FQ, dtype=np.float64)
    pos = np.asarray(pos, dtype=bool)
    neg = np.asarray(neg, dtype=bool)
    shape = (len(FP), len(FQ))
    if pos.shape != shape or neg.shape != shape:
        raise ValueError(f"masks must have shape {shape}")
    lam = np.ones(shape) if overlap is None else np.asarray(overlap, dtype=np.float64)
    rng = check_random_state(seed)
    aP = _pick_anchors(pos.any(axis=1), n_anchors, rng)
    aQ = _pick_anchors(pos.any(axis=0), n_anchors, rng)
    vP, gP1, gQ1 = _circle_direction(FP, FQ, pos, neg, lam, aP, gamma, delta_p, delta_n)
    vQ, gQ2, gP2 = _circle_direction(FQ, FP, pos.T, neg.T, lam.T, aQ, gamma, delta_p, delta_n)
    return LossValue(0.5 * (vP + vQ), {"FP": 0.5 * (gP1 + gP2), "FQ": 0.5 * (gQ1 + gQ2)})


def circle_sets(Phat_points, Qhat_points, T, r_pos, r_neg=None):
    """Positive pairs lie within ``r_pos`` after alignment, negatives beyond ``r_neg``."""
    r_neg = 2.0 * r_pos if r_neg is None else r_neg
    D = np.linalg.norm(T.apply(Phat_points)[:, None, :] - np.asarray(Qhat_points)[None], axis=-1)
    return D < r_pos, D > r_neg


def patch_overlap(P_points, Q_points, T, Phat_points, Qhat_points, radius, v, pairs=None):
    """Overlap ratio between the radius patches of super points ``i`` and ``j``.

    The fraction of ``P`` points in patch ``i`` whose aligned nearest
    neighbour within patch ``j`` lies closer than ``v``. Only ``pairs`` (a
    boolean mask, default all) are evaluated; the rest are zero.
    """
    P = T.apply(np.asarray(P_points, dtype=np.float64))
    Q = np.asarray(Q_points, dtype=np.float64)
    Ph = T.apply(np.asarray(Phat_points, dtype=np.float64))
    Qh = np.asarray(Qhat_points, dtype=np.float64)
    patches_P = cKDTree(P).query_ball_point(Ph, radius)
    patches_Q = cKDTree(Q).query_ball_point(Qh, radius)
    out = np.zeros((len(Ph), len(Qh)))
    mask = np.ones(out.shape, bool) if pairs is None else np.asarray(pairs, bool)
    for i, j in zip(*np.nonzero(mask)):
        a, b = patches_P[i], patches_Q[j]
        if not a or not b:
            continue
        d, _ = cKDTree(Q[b]).query(P[a])
        out[i, j] = np.mean(d < v)
    return out


# -- binary cross-entropy losses -------------------------------------------

def _bce(scores, labels, clamp):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if s.size == 0:
        return 0.0, np.zeros_like(s)
    c = np.clip(s, clamp, 1.0 - clamp)
    value = -np.mean(y * np.log(c) + (1.0 - y) * np.log1p(-c))
    inside = (s > clamp) & (s < 1.0 - clamp)
    grad = np.where(inside, (c - y) / (c * (1.0 - c)), 0.0) / s.size
    return float(value), grad


def _symmetric_bce(scores_P, labels_P, scores_Q, labels_Q, clamp):
    vP, gP = _bce(scores_P, labels_P, clamp)
    vQ, gQ = _bce(scores_Q, labels_Q, clamp)
    return LossValue(0.5 * (vP + vQ), {"scores_P": 0.5 * gP, "scores_Q": 0.5 * gQ})


def cpgm_loss(scores_P, labels_P, scores_Q, labels_Q, *, clamp=CLAMP):
    """Coarse partial-matching loss: symmetric BCE on super-point matching scores."""
    return _symmetric_bce(scores_P, labels_P, scores_Q, labels_Q, clamp)


def mbm_loss(scores_P, labels_P, scores_Q, labels_Q, *, clamp=CLAMP):
    """Mini-batch matching loss: symmetric BCE on fine-point matching scores."""
    return _symmetric_bce(scores_P, labels_P, scores_Q, labels_Q, clamp)


def overlap_loss(scores_P, labels_P, scores_Q, labels_Q, *, clamp=CLAMP):
    """Overlap classification loss: symmetric BCE on predicted overlap scores."""
    return _symmetric_bce(scores_P, labels_P, scores_Q, labels_Q, clamp)


def plan_scores(gamma, marg):
    """Per-point matching scores: row/column masses divided by their caps ``p``/``q``."""
    gamma = np.asarray(gamma, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        sP = np.where(marg.p > 0, gamma.sum(axis=1) / marg.p, 0.0)
        sQ = np.where(marg.q > 0, gamma.sum(axis=0) / marg.q, 0.0)
    return np.clip(sP, 0.0, 1.0), np.clip(sQ, 0.0, 1.0)


def total_loss(components, lambda_c=LAMBDA_C, lambda_f=LAMBDA_F):
    """``lambda_c * (coc + cpgm) + lambda_f * (mbm + o)``.

    ``components`` maps ``"coc"``, ``"cpgm"``, ``"mbm"`` and ``"o"`` to
    :class:`LossValue`. Gradients are returned per component
    (``"coc/FP"``, ``"o/scores_Q"``, ...), scaled by the component weight.
    """
    weights = {"coc": lambda_c, "cpgm": lambda_c, "mbm": lambda_f, "o": lambda_f}
    missing = set(weights) - set(components)
    if missing:
        raise ValueError(f"missing loss components: {sorted(missing)}")
    value = sum(weights[k] * components[k].value for k in weights)
    grads = {
        f"{k}/{name}": weights[k] * g
        for k in weights for name, g in components[k].gradients.items()
    }
    return LossValue(float(value), grads)


def finite_difference_check(fn, inputs, h=1e-5):
    """Max over coordinates of ``|g_fd - g| / max(1, |g|)`` using central differences.

    ``fn(**inputs)`` must return a :class:`LossValue` whose gradient keys are
    a subset of ``inputs``.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    inputs = {k: np.array(v, dtype=np.float64) if k in fn(**inputs).gradients else v
              for k, v in inputs.items()}
    base = fn(**inputs)
    worst = 0.0
    for name, g in base.gradients.items():
        x = inputs[name]
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            up = fn(**inputs).value
            x[idx] = orig - h
            down = fn(**inputs).value
            x[idx] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(g[idx])))
    return float(worst)


# -- finite-difference suite -------------------------------------------------

def _circle_instance(rng):
    N, M, b = rng.integers(6, 14), rng.integers(6, 14), 8
    FP = rng.normal(size=(N, b)) * 0.5
    FQ = rng.normal(size=(M, b)) * 0.5
    pos = rng.random((N, M)) < 0.2
    neg = ~pos & (rng.random((N, M)) < 0.7)
    return {"FP": FP, "FQ": FQ, "pos": pos, "neg": neg, "overlap": rng.uniform(0.1, 1.0, (N, M))}


def _bce_instance(rng):
    n, m = rng.integers(5, 40, 2)
    return {
        "scores_P": rng.uniform(0.02, 0.98, n), "labels_P": (rng.random(n) < 0.5).astype(float),
        "scores_Q": rng.uniform(0.02, 0.98, m), "labels_Q": (rng.random(m) < 0.5).astype(float),
    }


GRADCHECK_CASES = {
    "coc": (circle_loss, _circle_instance),
    "cpgm": (cpgm_loss, _bce_instance),
    "mbm": (mbm_loss, _bce_instance),
    "o": (overlap_loss, _bce_instance),
}


def gradcheck_suite(n_seeds=20, h=1e-5):
    """Worst finite-difference error of each loss over ``n_seeds`` random instances."""
    out = {}
    for k, (name, (fn, make)) in enumerate(GRADCHECK_CASES.items()):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng([seed, k])
            worst = max(worst, finite_difference_check(fn, make(rng), h))
        out[name] = worst
    return out
