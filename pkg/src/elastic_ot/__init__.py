"""Optimal transport with elastic costs: ground-truth maps, MBO estimation, subspace learning."""

from .costs import ElasticCost, Regularizer, StiefelMatrix
from .htransform import GroundTruthMap, PGDSettings, QuadraticPotential, h_transform
from .sinkhorn import DiscreteProblem, SinkhornSettings, mbo_map, solve_duals

__all__ = [
    "DiscreteProblem",
    "ElasticCost",
    "GroundTruthMap",
    "PGDSettings",
    "QuadraticPotential",
    "Regularizer",
    "SinkhornSettings",
    "StiefelMatrix",
    "h_transform",
    "mbo_map",
    "solve_duals",
]

__version__ = "0.1.0"
