"""Scene flow estimation for 3D point clouds.

Transport-based soft correspondence initializes a per-point flow field,
which a run-time residual optimizer then refines against self-supervised
distance and smoothness objectives.
"""

from .cloud import (
    FlowField,
    NeighborIndex,
    PointCloud,
    build_index,
    knn,
    load_cloud,
    load_flow,
    save_cloud,
    save_flow,
)
from .errors import (
    DegenerateFeature,
    DegenerateTransport,
    InvalidInput,
    NumericalDivergence,
    ParseError,
    ScoopError,
    ShapeMismatch,
)
from .evaluation import MetricReport, metrics, point_errors
from .features import (
    CostMatrix,
    FeatureMatrix,
    FeatureProvider,
    LocalPca,
    Precomputed,
    XyzCentered,
    cost_matrix,
    extract_features,
)
from .flowinit import (
    CorrespondenceConfig,
    CorrespondenceResult,
    confidence,
    correspond,
    initial_flow,
    soft_correspondence,
    top_k_weights,
)
from .objective import (
    DistanceMode,
    LossConfig,
    LossReport,
    chamfer_loss,
    confidence_distance_loss,
    confidence_loss,
    evaluate_losses,
    nn_distance_loss,
    smoothness_loss,
    total_loss,
)
from .pipeline import PipelineConfig, ScenePairResult, estimate, estimate_chunked
from .refine import RefineConfig, RefineTrace, refine, refine_gradient, refine_objective
from .synthetic import ShapeKind, SyntheticSceneSpec, gen_synthetic
from .transport import TransportConfig, TransportPlan, marginals, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceConfig", "CorrespondenceResult", "CostMatrix",
    "DegenerateFeature", "DegenerateTransport", "DistanceMode",
    "FeatureMatrix", "FeatureProvider", "FlowField", "InvalidInput",
    "LocalPca", "LossConfig", "LossReport", "MetricReport",
    "NeighborIndex", "NumericalDivergence", "ParseError",
    "PipelineConfig", "PointCloud", "Precomputed", "RefineConfig",
    "RefineTrace", "ScenePairResult", "ScoopError", "ShapeKind",
    "ShapeMismatch", "SyntheticSceneSpec", "TransportConfig",
    "TransportPlan", "XyzCentered",
    "build_index", "chamfer_loss", "confidence", "confidence_distance_loss",
    "confidence_loss", "correspond", "cost_matrix", "estimate",
    "estimate_chunked", "evaluate_losses", "extract_features",
    "gen_synthetic", "initial_flow", "knn", "load_cloud", "load_flow",
    "marginals", "metrics", "nn_distance_loss", "point_errors", "refine",
    "refine_gradient", "refine_objective", "save_cloud", "save_flow",
    "sinkhorn", "smoothness_loss", "soft_correspondence", "top_k_weights",
    "total_loss",
]
