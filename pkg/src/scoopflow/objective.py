"""Self-supervised loss terms: distance, confidence, smoothness, Chamfer.

All losses are plain scalar functions of immutable inputs with fixed
reduction order, so repeated evaluation is bit-reproducible. Reported
values use the exact L1 norm in the smoothness term; an optional delta
produces the sqrt(t^2 + delta^2) smoothing used by gradient code and
finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud import FlowField, NeighborIndex, PointCloud, build_index
from .errors import InvalidInput, ShapeMismatch


class DistanceMode(Enum):
    NEAREST_NEIGHBOR = "nn"
    CHAMFER = "chamfer"


@dataclass
class LossConfig:
    alpha_conf: float = 0.1
    alpha_flow: float = 10.0
    k_f: int = 32
    smoothness_delta: float = 1e-9
    distance_mode: DistanceMode = DistanceMode.NEAREST_NEIGHBOR

    def __post_init__(self):
        if self.alpha_conf < 0 or self.alpha_flow < 0:
            raise InvalidInput("loss weights must be nonnegative")
        if self.k_f < 1:
            raise InvalidInput(f"k_f must be positive, got {self.k_f}")
        if self.smoothness_delta <= 0:
            raise InvalidInput("smoothness_delta must be positive")
        if isinstance(self.distance_mode, str):
            self.distance_mode = DistanceMode(self.distance_mode)


@dataclass
class LossReport:
    dist: float
    conf: float
    flow_smooth: float
    total: float

    def to_json_dict(self) -> dict:
        return {
            "dist": self.dist,
            "conf": self.conf,
            "flow_smooth": self.flow_smooth,
            "total": self.total,
        }


def nn_distance_loss(soft_targets: np.ndarray, target_index: NeighborIndex) -> float:
    """Mean squared distance from each soft target to its nearest target point."""
    soft_targets = np.asarray(soft_targets, dtype=np.float64)
    idx, _ = target_index.nearest(soft_targets)
    sq = np.sum((soft_targets - target_index.points[idx]) ** 2, axis=1)
    return float(np.mean(sq))


def confidence_distance_loss(soft_targets: np.ndarray, confidence: np.ndarray,
                             target_index: NeighborIndex) -> float:
    """Confidence-weighted mean squared nearest-neighbor distance."""
    soft_targets = np.asarray(soft_targets, dtype=np.float64)
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.shape != (soft_targets.shape[0],):
        raise ShapeMismatch(
            f"confidence shape {confidence.shape} vs {soft_targets.shape[0]} sources"
        )
    idx, _ = target_index.nearest(soft_targets)
    sq = np.sum((soft_targets - target_index.points[idx]) ** 2, axis=1)
    return float(np.mean(confidence * sq))


def confidence_loss(confidence: np.ndarray) -> float:
    """Mean of 1 - p, penalizing the all-zero-confidence shortcut."""
    return float(np.mean(1.0 - np.asarray(confidence, dtype=np.float64)))


def smoothness_neighborhoods(source_index: NeighborIndex, k_f: int) -> np.ndarray:
    """(n, k_f) nearest-neighbor indices within the source, self excluded."""
    n = source_index.n
    if k_f >= n:
        raise InvalidInput(f"k_f={k_f} must be smaller than the cloud size {n}")
    nbr, _ = source_index.knn_batch(source_index.points, k_f + 1)
    is_self = nbr == np.arange(n)[:, None]
    has_self = is_self.any(axis=1)
    drop = np.where(has_self, np.argmax(is_self, axis=1), k_f)
    keep = np.ones_like(nbr, dtype=bool)
    keep[np.arange(n), drop] = False
    return nbr[keep].reshape(n, k_f)


def smoothness_loss(flow: FlowField, source_index: NeighborIndex, k_f: int,
                    delta: float | None = None) -> float:
    """Mean L1 difference between each flow vector and its source neighbors.

    (1 / (n * k_f)) sum_i sum_{l in N(i)} |f_i - f_l|_1 over the k_f
    Euclidean neighbors of each source point (self excluded). ``delta``
    switches each |t| to sqrt(t^2 + delta^2) for differentiable variants.
    """
    if flow.n != source_index.n:
        raise ShapeMismatch(f"flow has {flow.n} vectors for {source_index.n} points")
    nbr = smoothness_neighborhoods(source_index, k_f)
    diffs = flow.vectors[:, None, :] - flow.vectors[nbr]
    if delta is None:
        vals = np.abs(diffs)
    else:
        vals = np.sqrt(diffs * diffs + delta * delta)
    return float(vals.sum() / (flow.n * k_f))


def chamfer_loss(warped: PointCloud, target: PointCloud) -> float:
    """Bidirectional mean squared nearest-neighbor distance between two clouds."""
    fwd = nn_distance_loss(warped.points, build_index(target))
    bwd = nn_distance_loss(target.points, build_index(warped))
    return fwd + bwd


def total_loss(dist: float, conf: float, flow_smooth: float, cfg: LossConfig) -> LossReport:
    """Weighted sum of the loss parts."""
    total = dist + cfg.alpha_conf * conf + cfg.alpha_flow * flow_smooth
    return LossReport(dist=float(dist), conf=float(conf),
                      flow_smooth=float(flow_smooth), total=float(total))


def evaluate_losses(x: PointCloud, y: PointCloud, flow: FlowField,
                    confidence: np.ndarray, cfg: LossConfig,
                    target_index: NeighborIndex | None = None,
                    source_index: NeighborIndex | None = None) -> LossReport:
    """Loss report for a flow state: distance + confidence + smoothness terms.

    The distance term follows cfg.distance_mode: confidence-weighted
    nearest-neighbor distance of the warped source, or the bidirectional
    Chamfer distance (which ignores confidence).
    """
    if flow.n != x.n:
        raise ShapeMismatch(f"flow has {flow.n} vectors for {x.n} source points")
    if target_index is None:
        target_index = build_index(y)
    if source_index is None:
        source_index = build_index(x)
    warped = x.points + flow.vectors
    if cfg.distance_mode is DistanceMode.CHAMFER:
        dist = chamfer_loss(PointCloud(warped), y)
    else:
        dist = confidence_distance_loss(warped, confidence, target_index)
    conf = confidence_loss(confidence)
    smooth = smoothness_loss(flow, source_index, cfg.k_f)
    return total_loss(dist, conf, smooth, cfg)
