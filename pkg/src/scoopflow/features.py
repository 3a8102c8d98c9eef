"""Per-point feature providers and the distance-gated cosine matching cost."""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, build_index
from .errors import DegenerateFeature, InvalidInput, ParseError, ShapeMismatch

_SFF_MAGIC = b"SFF1"

DEFAULT_GATE_RADIUS = 10.0


@dataclass
class FeatureMatrix:
    """n feature vectors of dimension d; rows must be finite and nonzero."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise InvalidInput(f"feature rows must be 2D, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise InvalidInput("feature rows contain non-finite values")
        norms = np.linalg.norm(self.rows, axis=1)
        if np.any(norms == 0.0):
            bad = int(np.argmin(norms))
            raise DegenerateFeature(f"feature row {bad} has zero norm")
        self.rows.setflags(write=False)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


class FeatureProvider(ABC):
    """Produces per-point feature vectors for a cloud.

    ``indices`` carries the points' positions in the full-resolution cloud
    (used by file-backed providers when a chunk is passed); ``role`` is
    "source" or "target".
    """

    @abstractmethod
    def extract(self, cloud: PointCloud, indices=None, role: str = "source") -> FeatureMatrix:
        ...


@dataclass
class XyzCentered(FeatureProvider):
    """Coordinates relative to the cloud centroid (d=3)."""

    def extract(self, cloud: PointCloud, indices=None, role: str = "source") -> FeatureMatrix:
        return FeatureMatrix(cloud.points - cloud.points.mean(axis=0))


@dataclass
class LocalPca(FeatureProvider):
    """Centered coordinates plus normalized local covariance spectrum (d=6).

    For each point, the covariance of its k_geo nearest neighbors is
    eigendecomposed; the eigenvalues are sorted in nonincreasing order and
    divided by their sum, so the triple always sums to 1. A neighborhood
    whose points all coincide has no spectrum and gets the uniform triple.
    """

    k_geo: int = 16

    def extract(self, cloud: PointCloud, indices=None, role: str = "source") -> FeatureMatrix:
        if cloud.n < self.k_geo:
            raise InvalidInput(
                f"LocalPca needs at least k_geo={self.k_geo} points, cloud has {cloud.n}"
            )
        index = build_index(cloud)
        nbr, _ = index.knn_batch(cloud.points, self.k_geo)
        groups = cloud.points[nbr]                       # (n, k_geo, 3)
        centered = groups - groups.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / self.k_geo
        eig = np.linalg.eigvalsh(cov)                    # ascending, >= 0 up to roundoff
        eig = np.clip(eig[:, ::-1], 0.0, None)
        total = eig.sum(axis=1, keepdims=True)
        flat = total[:, 0] == 0.0
        total[flat] = 1.0
        spectrum = eig / total
        spectrum[flat] = 1.0 / 3.0
        coords = cloud.points - cloud.points.mean(axis=0)
        return FeatureMatrix(np.hstack([coords, spectrum]))


@dataclass
class Precomputed(FeatureProvider):
    """Feature rows replayed from SFF files exported by an external model."""

    source_path: str | Path
    target_path: str | Path | None = None

    def _rows(self, role: str) -> np.ndarray:
        cache = self.__dict__.setdefault("_cache", {})
        path = self.target_path if (role == "target" and self.target_path is not None) else self.source_path
        key = str(path)
        if key not in cache:
            cache[key] = load_features(path)
        return cache[key]

    def extract(self, cloud: PointCloud, indices=None, role: str = "source") -> FeatureMatrix:
        rows = self._rows(role)
        if indices is not None:
            indices = np.asarray(indices, dtype=np.intp)
            if indices.size and indices.max() >= rows.shape[0]:
                raise ShapeMismatch(
                    f"feature file has {rows.shape[0]} rows, index {int(indices.max())} requested"
                )
            rows = rows[indices]
        if rows.shape[0] != cloud.n:
            raise ShapeMismatch(
                f"feature file has {rows.shape[0]} rows for a cloud of {cloud.n} points"
            )
        return FeatureMatrix(rows)


def extract_features(provider: FeatureProvider, cloud: PointCloud,
                     indices=None, role: str = "source") -> FeatureMatrix:
    """Run a provider on a cloud."""
    return provider.extract(cloud, indices=indices, role=role)


def load_features(path) -> np.ndarray:
    """Read an SFF feature file: magic "SFF1", u32 n, u32 d, n*d float32 LE."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ParseError("SFF file shorter than its 12-byte header", len(data))
    if data[:4] != _SFF_MAGIC:
        raise ParseError(f"bad SFF magic {data[:4]!r}", 0)
    n, d = struct.unpack_from("<II", data, 4)
    if n < 1 or d < 1:
        raise ParseError(f"bad SFF dimensions n={n} d={d}", 4)
    need = n * d * 4
    if len(data) - 12 < need:
        raise ParseError(
            f"truncated SFF payload: need {need} bytes, have {len(data) - 12}",
            len(data),
        )
    return np.frombuffer(data, dtype="<f4", count=n * d, offset=12).reshape(n, d).astype(np.float64)


def save_features(rows: np.ndarray, path) -> None:
    """Write an SFF feature file."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    header = _SFF_MAGIC + struct.pack("<II", rows.shape[0], rows.shape[1])
    Path(path).write_bytes(header + rows.tobytes())


@dataclass
class CostMatrix:
    """Cosine matching costs with a Euclidean distance gate.

    ``cost`` holds 1 - cosine similarity for every pair; ``gated`` marks
    pairs at or beyond the gate radius. Gated pairs keep their finite
    cosine cost here (the transport step zeroes their mass), which avoids
    propagating infinities.
    """

    cost: np.ndarray
    gated: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.gated = np.asarray(self.gated, dtype=bool)
        if self.cost.shape != self.gated.shape or self.cost.ndim != 2:
            raise InvalidInput(
                f"cost {self.cost.shape} and gate {self.gated.shape} must be equal 2D shapes"
            )
        self.cost.setflags(write=False)
        self.gated.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape

    @property
    def similarity(self) -> np.ndarray:
        return 1.0 - self.cost

    @property
    def fully_gated_rows(self) -> np.ndarray:
        return self.gated.all(axis=1)


def cost_matrix(fx: FeatureMatrix, fy: FeatureMatrix, x: PointCloud, y: PointCloud,
                gate_radius: float = DEFAULT_GATE_RADIUS) -> CostMatrix:
    """Distance-gated cosine matching cost between two featured clouds.

    cost[i, j] = 1 - <fx_i, fy_j> / (|fx_i| |fy_j|); pairs whose points are
    gate_radius or more apart are flagged as gated.
    """
    if fx.n != x.n or fy.n != y.n:
        raise ShapeMismatch(
            f"features ({fx.n}, {fy.n}) do not match clouds ({x.n}, {y.n})"
        )
    if fx.d != fy.d:
        raise ShapeMismatch(f"feature dimensions differ: {fx.d} vs {fy.d}")
    if gate_radius <= 0:
        raise InvalidInput(f"gate_radius must be positive, got {gate_radius}")

    ux = fx.rows / np.linalg.norm(fx.rows, axis=1, keepdims=True)
    uy = fy.rows / np.linalg.norm(fy.rows, axis=1, keepdims=True)
    sim = np.clip(ux @ uy.T, -1.0, 1.0)

    sq = (
        np.sum(x.points**2, axis=1)[:, None]
        + np.sum(y.points**2, axis=1)[None, :]
        - 2.0 * (x.points @ y.points.T)
    )
    np.clip(sq, 0.0, None, out=sq)
    gated = sq >= gate_radius * gate_radius
    return CostMatrix(1.0 - sim, gated)
