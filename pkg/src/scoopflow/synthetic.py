"""Synthetic scene-pair generation for benchmarks and the acceptance suite.

A scene pair is a source cloud drawn from a shape generator and a target
produced by a rigid transform of the source plus optional per-point jitter
and occlusion (points removed from the target only). The ground-truth flow
is the rigid displacement, defined before jitter and occlusion, and is
attached to the source cloud. All sampling uses a single seeded PCG64
generator, so scenes are fully reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cloud import PointCloud
from .errors import InvalidInput


class ShapeKind(Enum):
    UNIFORM_BOX = "uniform_box"
    PLANES = "planes"
    CLUSTERED_BLOBS = "clustered_blobs"


@dataclass
class SyntheticSceneSpec:
    n_points: int
    shape: ShapeKind = ShapeKind.UNIFORM_BOX
    rotation_deg: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    jitter_sigma: float = 0.0
    occlusion: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise InvalidInput("n_points must be positive")
        if isinstance(self.shape, str):
            self.shape = ShapeKind(self.shape)
        if not (0.0 <= self.occlusion < 1.0):
            raise InvalidInput(f"occlusion must lie in [0, 1), got {self.occlusion}")
        if self.jitter_sigma < 0:
            raise InvalidInput("jitter_sigma must be nonnegative")


def _rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    # Rodrigues' formula.
    k = axis / np.linalg.norm(axis)
    kx = np.array([
        [0.0, -k[2], k[1]],
        [k[2], 0.0, -k[0]],
        [-k[1], k[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle_rad) * kx + (1.0 - np.cos(angle_rad)) * (kx @ kx)


def _sample_shape(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_points
    if spec.shape is ShapeKind.UNIFORM_BOX:
        return rng.uniform(0.0, 1.0, size=(n, 3))
    if spec.shape is ShapeKind.PLANES:
        # Three random planar patches spanning the unit box.
        pts = np.empty((n, 3))
        counts = np.full(3, n // 3)
        counts[: n % 3] += 1
        row = 0
        for c in counts:
            origin = rng.uniform(0.2, 0.8, size=3)
            basis = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :2]
            uv = rng.uniform(-0.5, 0.5, size=(c, 2))
            pts[row:row + c] = origin + uv @ basis.T
            row += c
        return pts
    if spec.shape is ShapeKind.CLUSTERED_BLOBS:
        k = 5
        centers = rng.uniform(0.0, 1.0, size=(k, 3))
        assign = rng.integers(0, k, size=n)
        return centers[assign] + rng.normal(scale=0.08, size=(n, 3))
    raise InvalidInput(f"unknown shape {spec.shape}")


def gen_synthetic(spec: SyntheticSceneSpec) -> tuple[PointCloud, PointCloud]:
    """Generate (source, target); the source carries the ground-truth flow.

    The rigid motion rotates by exactly rotation_deg about a seeded random
    axis through the source centroid, then translates. Jitter perturbs the
    target only; occlusion removes floor(occlusion * n) random target
    points.
    """
    rng = np.random.default_rng(spec.seed)
    source = _sample_shape(spec, rng)

    axis = rng.normal(size=3)
    rot = _rotation_matrix(axis, np.deg2rad(spec.rotation_deg))
    centroid = source.mean(axis=0)
    moved = (source - centroid) @ rot.T + centroid + np.asarray(spec.translation, dtype=np.float64)
    gt_flow = moved - source

    target = moved.copy()
    if spec.jitter_sigma > 0:
        target = target + rng.normal(scale=spec.jitter_sigma, size=target.shape)
    n_drop = int(spec.occlusion * spec.n_points)
    if n_drop > 0:
        keep = np.sort(rng.permutation(spec.n_points)[n_drop:])
        target = target[keep]

    return PointCloud(source, gt_flow=gt_flow), PointCloud(target)
