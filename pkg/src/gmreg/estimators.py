"""scikit-learn style wrappers around the functional API."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive
from .affinity import DEFAULT_ALPHA, coarse_affinities
from .geometry import PointCloud
from .losses import plan_scores
from .ot import Marginals, SolverConfig, fgm_solve, pgm_proximal
from .registration import INDOOR, INLIER_THRESH, RANSAC_ITERS, TEMPERATURE, PipelineConfig, register
from .synth import DESCRIPTOR_BINS, local_descriptor


def _as_cloud(X, name, need_features=False):
    if isinstance(X, PointCloud):
        cloud = X
    else:
        cloud = PointCloud(check_points(X, name))
    if need_features and cloud.features is None:
        raise ValueError(f"{name} needs features")
    return cloud


class LocalDescriptor(TransformerMixin, BaseEstimator):
    """Rigid-invariant handcrafted point descriptor.

    The descriptor standardises its statistics over the cloud it describes,
    so ``fit`` only validates the input.
    """

    def __init__(self, radius=0.5, dim=32, n_bins=DESCRIPTOR_BINS, seed=0):
        self.radius = radius
        self.dim = dim
        self.n_bins = n_bins
        self.seed = seed

    def fit(self, X, y=None):
        check_positive(self.radius, "radius")
        X = check_points(X.points if isinstance(X, PointCloud) else X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_points(X.points if isinstance(X, PointCloud) else X)
        return local_descriptor(X, self.radius, self.dim, self.n_bins, self.seed).features


class _MatcherBase(BaseEstimator):
    def _solver_config(self):
        return SolverConfig(epsilon=self.epsilon, outer_iters=self.outer_iters,
                            inner_iters=self.inner_iters, tol=self.tol, seed=self.seed)

    def _costs(self, P, Q):
        P = _as_cloud(P, "P", need_features=True)
        Q = _as_cloud(Q, "Q", need_features=True)
        if P.overlap_scores is None:
            P = P.with_overlap_scores(np.ones(len(P)))
        if Q.overlap_scores is None:
            Q = Q.with_overlap_scores(np.ones(len(Q)))
        return coarse_affinities(P, Q, self.alpha)

    def predict(self, P=None, Q=None):
        """Column matched to every row by plan argmax; ``-1`` where the row score is below ``threshold``."""
        check_is_fitted(self, "plan_")
        match = self.plan_.gamma.argmax(axis=1)
        return np.where(self.row_scores_ >= self.threshold, match, -1)


class PartialGraphMatcher(_MatcherBase):
    """Partial graph matching between two featured clouds (proximal point + Dykstra)."""

    def __init__(self, mass=0.5, alpha=DEFAULT_ALPHA, epsilon=5e-3, outer_iters=50,
                 inner_iters=1, tol=1e-6, threshold=0.5, seed=0):
        self.mass = mass
        self.alpha = alpha
        self.epsilon = epsilon
        self.outer_iters = outer_iters
        self.inner_iters = inner_iters
        self.tol = tol
        self.threshold = threshold
        self.seed = seed

    def fit(self, P, Q):
        C = self._costs(P, Q)
        marg = Marginals.uniform(*C.shape, s=self.mass)
        self.plan_ = pgm_proximal(C, marg, self._solver_config())
        self.row_scores_, self.col_scores_ = plan_scores(self.plan_.gamma, marg)
        return self


class GraphMatcher(_MatcherBase):
    """Full graph matching with equality marginals."""

    def __init__(self, alpha=DEFAULT_ALPHA, epsilon=5e-3, outer_iters=50, inner_iters=1,
                 tol=1e-6, threshold=0.0, seed=0):
        self.alpha = alpha
        self.epsilon = epsilon
        self.outer_iters = outer_iters
        self.inner_iters = inner_iters
        self.tol = tol
        self.threshold = threshold
        self.seed = seed

    def fit(self, P, Q):
        C = self._costs(P, Q)
        marg = Marginals.uniform(*C.shape)
        self.plan_ = fgm_solve(C, marg, self._solver_config())
        self.row_scores_, self.col_scores_ = plan_scores(self.plan_.gamma, marg)
        return self


class RigidRegistration(BaseEstimator):
    """End-to-end registration of a featured source cloud onto a target cloud.

    After ``fit(P, Q)``, ``transform(X)`` maps points from the frame of ``P``
    into the frame of ``Q``.
    """

    def __init__(self, n_super=128, overlap_mass=0.3, alpha=DEFAULT_ALPHA, epsilon=5e-3,
                 n_samples=1000, temperature=TEMPERATURE, inlier_thresh=INLIER_THRESH[INDOOR],
                 iters=RANSAC_ITERS, seed=0):
        self.n_super = n_super
        self.overlap_mass = overlap_mass
        self.alpha = alpha
        self.epsilon = epsilon
        self.n_samples = n_samples
        self.temperature = temperature
        self.inlier_thresh = inlier_thresh
        self.iters = iters
        self.seed = seed

    def _pipeline_config(self):
        return PipelineConfig(
            n_super=self.n_super, overlap_mass=self.overlap_mass, alpha=self.alpha,
            solver=SolverConfig(epsilon=self.epsilon, seed=self.seed), n_samples=self.n_samples,
            temperature=self.temperature, inlier_thresh=self.inlier_thresh, iters=self.iters,
            seed=self.seed,
        )

    def fit(self, P, Q):
        P = _as_cloud(P, "P", need_features=True)
        Q = _as_cloud(Q, "Q", need_features=True)
        self.result_ = register(P, Q, self._pipeline_config())
        self.transform_ = self.result_.transform
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        pts = X.points if isinstance(X, PointCloud) else check_points(X)
        return self.transform_.apply(pts)
