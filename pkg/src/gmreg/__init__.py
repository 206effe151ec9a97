"""Graph-matching optimisation and rigid point-cloud registration.

The functional API lives in the submodules; :mod:`gmreg.estimators` wraps
it in scikit-learn style estimators and :mod:`gmreg.cli` exposes it on the
command line.
"""

from .affinity import CostMatrices, coarse_affinities, fine_affinities, gw_linearized_cost, gw_objective
from .embedding import (AttentionWeights, cross_attention, geometric_self_attention,
                        geometric_structure_embedding, sinusoidal_embed)
from .estimators import GraphMatcher, LocalDescriptor, PartialGraphMatcher, RigidRegistration
from .geometry import (CorrespondenceSet, PointCloud, RigidTransform, SpatialIndex, apply_transform,
                       kabsch_fit, nearest_neighbor, overlap_labels, overlap_ratio)
from .minibatch import MiniBatchPlan, minibatch_gm, sample_subsets
from .ot import (Marginals, SolverConfig, TransportPlan, exact_small_oracle, fgm_solve,
                 partial_ot_dykstra, pgm_proximal, round_to_feasible, sinkhorn)
from .registration import (PipelineConfig, RegistrationResult, compute_metrics, confidence_sample,
                           ransac_register, register)
from .synth import SceneConfig, generate_pair, local_descriptor, oracle_features

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights", "CorrespondenceSet", "CostMatrices", "GraphMatcher", "LocalDescriptor",
    "Marginals", "MiniBatchPlan", "PartialGraphMatcher", "PipelineConfig", "PointCloud",
    "RegistrationResult", "RigidRegistration", "RigidTransform", "SceneConfig", "SolverConfig",
    "SpatialIndex", "TransportPlan", "apply_transform", "coarse_affinities", "compute_metrics",
    "confidence_sample", "cross_attention", "exact_small_oracle", "fgm_solve", "fine_affinities",
    "generate_pair", "geometric_self_attention", "geometric_structure_embedding",
    "gw_linearized_cost", "gw_objective", "kabsch_fit", "local_descriptor", "minibatch_gm",
    "nearest_neighbor", "oracle_features", "overlap_labels", "overlap_ratio", "partial_ot_dykstra",
    "pgm_proximal", "ransac_register", "register", "round_to_feasible", "sample_subsets",
    "sinkhorn", "sinusoidal_embed",
]
