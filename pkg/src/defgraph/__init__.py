"""Sequential non-rigid point cloud registration with sparse deformation graphs."""

from .core import (DefGraphError, DeformationGraph, DegenerateGeometry, InvalidArgument, Normalization,
                   NumericalFailure, RegistrationResult, Se3, SpatialGrid, farthest_point_sample, knn)
from .evaluation import MetricsReport, ate3d, compare, delta_inlier, evaluate
from .kernels import BACKEND
from .pipeline import PipelineConfig, register_dense, register_sequence

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "DefGraphError", "DeformationGraph", "DegenerateGeometry", "InvalidArgument",
    "MetricsReport", "Normalization", "NumericalFailure", "PipelineConfig", "RegistrationResult",
    "Se3", "SpatialGrid", "ate3d", "compare", "delta_inlier", "evaluate", "farthest_point_sample",
    "knn", "register_dense", "register_sequence",
]
