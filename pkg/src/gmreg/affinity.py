"""Intra- and inter-graph cost matrices and the linearised Gromov-Wasserstein cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ._validation import check_matrix

DEFAULT_ALPHA = 0.01


@dataclass(frozen=True, eq=False)
class CostMatrices:
    """``Cp`` (N x N), ``Cq`` (M x M) intra-graph costs and ``Cpq`` (N x M) cross cost."""

    Cp: np.ndarray
    Cq: np.ndarray
    Cpq: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        Cp = check_matrix(self.Cp, "Cp")
        Cq = check_matrix(self.Cq, "Cq")
        Cpq = check_matrix(self.Cpq, "Cpq", shape=(Cp.shape[0], Cq.shape[0]))
        for name, C in (("Cp", Cp), ("Cq", Cq)):
            if C.shape[0] != C.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.abs(C - C.T).max() > 1e-9:
                raise ValueError(f"{name} must be symmetric")
            if np.abs(np.diag(C)).max() > 1e-9:
                raise ValueError(f"{name} must have a zero diagonal")
        for name, C in (("Cp", Cp), ("Cq", Cq), ("Cpq", Cpq)):
            if np.any(C < 0):
                raise ValueError(f"{name} must be non-negative")
            C.flags.writeable = False
        object.__setattr__(self, "Cp", Cp)
        object.__setattr__(self, "Cq", Cq)
        object.__setattr__(self, "Cpq", Cpq)

    @property
    def shape(self):
        return self.Cpq.shape

    def restrict(self, rows, cols):
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        return CostMatrices(
            self.Cp[np.ix_(rows, rows)], self.Cq[np.ix_(cols, cols)],
            self.Cpq[np.ix_(rows, cols)], self.alpha,
        )


def _pairwise(X):
    D = cdist(X, X)
    # cdist is symmetric up to rounding; enforce it exactly
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def _require(cloud, what, name):
    if getattr(cloud, what) is None:
        raise ValueError(f"{name} is missing {what.replace('_', ' ')}")


def coarse_affinities(Phat, Qhat, alpha=DEFAULT_ALPHA):
    """Super-point costs: feature distance plus overlap-weighted geometric distance."""
    for cloud, name in ((Phat, "Phat"), (Qhat, "Qhat")):
        _require(cloud, "features", name)
        _require(cloud, "overlap_scores", name)
    oP, oQ = Phat.overlap_scores, Qhat.overlap_scores
    Cp = _pairwise(Phat.features) + np.outer(oP, oP) * alpha * _pairwise(Phat.points)
    Cq = _pairwise(Qhat.features) + np.outer(oQ, oQ) * alpha * _pairwise(Qhat.points)
    return CostMatrices(Cp, Cq, cdist(Phat.features, Qhat.features), alpha)


def fine_affinities(P, Q, alpha=DEFAULT_ALPHA):
    """Fine-level costs: feature distance plus ``alpha`` times geometric distance."""
    _require(P, "features", "P")
    _require(Q, "features", "Q")
    Cp = _pairwise(P.features) + alpha * _pairwise(P.points)
    Cq = _pairwise(Q.features) + alpha * _pairwise(Q.points)
    return CostMatrices(Cp, Cq, cdist(P.features, Q.features), alpha)


def gw_linearized_cost(C, gamma):
    """``L[j, j'] = sum_{i, i'} 0.5 * (Cp[i, j] - Cq[i', j'])**2 * gamma[i, i']``.

    Evaluated through the square-loss decomposition in O(N^2 M + N M^2).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != C.shape:
        raise ValueError(f"plan has shape {gamma.shape}, expected {C.shape}")
    Cp, Cq = C.Cp, C.Cq
    row = gamma.sum(axis=1)
    col = gamma.sum(axis=0)
    term_p = 0.5 * ((Cp * Cp).T @ row)
    term_q = 0.5 * ((Cq * Cq).T @ col)
    return term_p[:, None] + term_q[None, :] - Cp.T @ gamma @ Cq


def gw_objective(C, gamma):
    """Linear plus quadratic matching objective ``<Cpq, G> + <L(G), G>``."""
    return float(np.sum(C.Cpq * gamma) + np.sum(gw_linearized_cost(C, gamma) * gamma))
