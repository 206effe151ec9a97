"""Mini-batch full graph matching over overlap-region subsets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._random import check_random_state
from .affinity import DEFAULT_ALPHA, fine_affinities
from .ot import Marginals, SolverConfig, fgm_solve

INDEPENDENT = "independent"
PAIRED = "paired"


@dataclass(frozen=True, eq=False)
class MiniBatchPlan:
    """Average of ``K`` batch plans scattered into global ``N x M`` coordinates."""

    global_gamma: np.ndarray
    K: int
    m: int
    subset_indices: list
    batch_plans: list = field(default_factory=list, repr=False)

    @property
    def sampled_rows(self):
        return np.unique(np.concatenate([r for r, _ in self.subset_indices]))

    def row_matches(self, rows=None):
        """Row-argmax of the global plan, for ``rows`` (default: every sampled row)."""
        rows = self.sampled_rows if rows is None else np.asarray(rows, dtype=np.intp)
        return rows, self.global_gamma[rows].argmax(axis=1)


def _as_index(idx, name):
    if idx is None:
        raise ValueError(f"{name} is required unless pairs are given")
    idx = np.asarray(idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    idx = idx.astype(np.intp).ravel()
    if len(np.unique(idx)) != len(idx):
        raise ValueError(f"{name} contains duplicate indices")
    return idx


def sample_subsets(P_overlap_idx, Q_overlap_idx, m, K, seed=0, pairs=None):
    """Draw ``K`` subset pairs of size ``m``.

    Without ``pairs`` the row and column subsets are sampled independently
    and returned sorted. With ``pairs`` (an ``(n, 2)`` array of ground-truth
    matches inside the overlap region) ``m`` matches are drawn per batch, so
    the batch target is a permutation; rows are sorted and columns follow.
    """
    if m < 1 or K < 1:
        raise ValueError("m and K must be >= 1")
    rng = check_random_state(seed)
    if pairs is not None:
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        if len(pairs) < m:
            raise ValueError("overlap too small for batch size")
        out = []
        for _ in range(K):
            pick = pairs[np.sort(rng.choice(len(pairs), m, replace=False))]
            pick = pick[np.argsort(pick[:, 0], kind="stable")]
            out.append((pick[:, 0].copy(), pick[:, 1].copy()))
        return out
    P_idx = _as_index(P_overlap_idx, "P_overlap_idx")
    Q_idx = _as_index(Q_overlap_idx, "Q_overlap_idx")
    if len(P_idx) < m or len(Q_idx) < m:
        raise ValueError("overlap too small for batch size")
    return [
        (np.sort(rng.choice(P_idx, m, replace=False)), np.sort(rng.choice(Q_idx, m, replace=False)))
        for _ in range(K)
    ]


def scatter_average(shape, subsets, plans):
    """Embed each batch plan at its global indices and average over batches."""
    G = np.zeros(shape)
    for (rows, cols), plan in zip(subsets, plans):
        G[np.ix_(rows, cols)] += plan
    return G / len(plans)


def minibatch_gm(P, Q, P_mask, Q_mask, m, K, cfg=None, *, seed=None, pairs=None,
                 subsets=None, alpha=DEFAULT_ALPHA):
    """Solve ``fgm_solve`` on ``K`` batches of ``m`` points and scatter-average.

    ``P_mask``/``Q_mask`` select the overlap region (boolean masks or index
    arrays); ``None`` means the whole cloud. ``pairs`` switches to
    matched-pair sampling; ``subsets`` bypasses sampling entirely.
    """
    cfg = cfg or SolverConfig()
    seed = cfg.seed if seed is None else seed
    if subsets is None:
        if pairs is None:
            P_mask = np.arange(len(P.points)) if P_mask is None else P_mask
            Q_mask = np.arange(len(Q.points)) if Q_mask is None else Q_mask
        subsets = sample_subsets(P_mask, Q_mask, m, K, seed, pairs=pairs)
    marg = Marginals.uniform(m, m)
    plans = []
    for rows, cols in subsets:
        if len(rows) != m or len(cols) != m:
            raise ValueError("every subset must have exactly m indices")
        C = fine_affinities(P.subset(rows), Q.subset(cols), alpha)
        plans.append(fgm_solve(C, marg, cfg).gamma)
    G = scatter_average((len(P.points), len(Q.points)), subsets, plans)
    return MiniBatchPlan(G, len(subsets), m, list(subsets), plans)
