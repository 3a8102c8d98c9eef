"""From transport plan to matching weights, soft targets, initial flow, and confidence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import FlowField, PointCloud
from .errors import InvalidInput, ShapeMismatch
from .features import CostMatrix
from .transport import TransportPlan


@dataclass
class CorrespondenceConfig:
    k_s: int = 64

    def __post_init__(self):
        if self.k_s < 1:
            raise InvalidInput(f"k_s must be positive, got {self.k_s}")


@dataclass
class CorrespondenceResult:
    soft_targets: np.ndarray    # (n_s, 3)
    indices: np.ndarray         # (n_s, k_s) selected target indices
    weights: np.ndarray         # (n_s, k_s) softmax weights, rows sum to 1
    confidence: np.ndarray      # (n_s,) in [0, 1]
    initial_flow: FlowField


def top_k_weights(plan: TransportPlan, cfg: CorrespondenceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Select the k_s largest-mass targets per source row and softmax their masses.

    Ties in mass are broken by lower target index. Selected indices are
    ordered by decreasing mass. Setting k_s = n_t weights all targets.
    """
    n_s, n_t = plan.shape
    if cfg.k_s > n_t:
        raise InvalidInput(f"k_s={cfg.k_s} exceeds target count {n_t}")
    # Stable argsort of the negated masses: equal masses keep ascending index order.
    order = np.argsort(-plan.mass, axis=1, kind="stable")[:, : cfg.k_s]
    selected = np.take_along_axis(plan.mass, order, axis=1)
    shifted = selected - selected.max(axis=1, keepdims=True)
    expw = np.exp(shifted)
    weights = expw / expw.sum(axis=1, keepdims=True)
    return order, weights


def soft_correspondence(y: PointCloud, indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Convex combinations of the selected target points, one per source row."""
    indices = np.asarray(indices, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    if indices.shape != weights.shape:
        raise ShapeMismatch(f"indices {indices.shape} vs weights {weights.shape}")
    if indices.size and indices.max() >= y.n:
        raise InvalidInput(f"target index {int(indices.max())} out of range for {y.n} points")
    return np.einsum("ik,ikj->ij", weights, y.points[indices])


def initial_flow(x: PointCloud, soft_targets: np.ndarray) -> FlowField:
    """Flow vectors from each source point to its softly corresponding point."""
    soft_targets = np.asarray(soft_targets, dtype=np.float64)
    if soft_targets.shape != x.points.shape:
        raise ShapeMismatch(
            f"soft targets {soft_targets.shape} vs source points {x.points.shape}"
        )
    return FlowField(soft_targets - x.points)


def confidence(similarity: np.ndarray, indices: np.ndarray, weights: np.ndarray,
               fully_gated: np.ndarray | None = None) -> np.ndarray:
    """Weighted matching similarity per source, trimmed to [0, 1].

    s_i is the weight-averaged cosine similarity over the selected targets;
    confidence is max(s_i, 0). Sources whose entire cost row was gated get
    confidence 0.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    sel = np.take_along_axis(similarity, np.asarray(indices, dtype=np.intp), axis=1)
    s = np.sum(sel * weights, axis=1)
    p = np.maximum(s, 0.0)
    if fully_gated is not None:
        p = np.where(fully_gated, 0.0, p)
    return p


def correspond(x: PointCloud, y: PointCloud, plan: TransportPlan, cost: CostMatrix,
               cfg: CorrespondenceConfig) -> CorrespondenceResult:
    """Full correspondence stage: weights, soft targets, confidence, initial flow."""
    indices, weights = top_k_weights(plan, cfg)
    targets = soft_correspondence(y, indices, weights)
    p = confidence(cost.similarity, indices, weights, fully_gated=cost.fully_gated_rows)
    flow = initial_flow(x, targets)
    return CorrespondenceResult(
        soft_targets=targets, indices=indices, weights=weights,
        confidence=p, initial_flow=flow,
    )
