"""Core geometric types, exact nearest-neighbor search, and point-cloud file I/O.

Coordinates are stored as float64 regardless of file precision so that
downstream gradient checks have headroom beyond float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput, ParseError

_SFB_MAGIC = b"SFB1"


def _as_points(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 3:
        raise InvalidInput(f"{name} must have shape (n, 3), got {out.shape}")
    if out.shape[0] < 1:
        raise InvalidInput(f"{name} must contain at least one point")
    if not np.all(np.isfinite(out)):
        raise InvalidInput(f"{name} contains non-finite values")
    return out


@dataclass
class PointCloud:
    """An ordered list of 3D points (meters), optionally with ground-truth flow."""

    points: np.ndarray
    gt_flow: np.ndarray | None = None

    def __post_init__(self):
        self.points = _as_points(self.points, "points")
        self.points.setflags(write=False)
        if self.gt_flow is not None:
            self.gt_flow = _as_points(self.gt_flow, "gt_flow")
            if self.gt_flow.shape[0] != self.points.shape[0]:
                raise InvalidInput(
                    f"gt_flow has {self.gt_flow.shape[0]} vectors for "
                    f"{self.points.shape[0]} points"
                )
            self.gt_flow.setflags(write=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class FlowField:
    """Per-source-point 3D translation vectors (meters)."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = _as_points(self.vectors, "vectors")
        self.vectors.setflags(write=False)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


class NeighborIndex:
    """Exact Euclidean k-nearest-neighbor index over a point cloud.

    Immutable after construction and safe for concurrent read queries.
    Results are sorted by nondecreasing squared distance with ties broken
    by lower point index, so queries are fully deterministic.
    """

    def __init__(self, cloud: PointCloud):
        self._points = cloud.points
        self._tree = cKDTree(self._points)

    @property
    def n(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def knn(self, query, k: int) -> list[tuple[int, float]]:
        """k nearest neighbors of a single query point.

        Returns ``[(point index, squared distance), ...]`` of length k.
        """
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx, sq = self.knn_batch(q[None, :], k)
        return list(zip(idx[0].tolist(), sq[0].tolist()))

    def knn_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized knn: returns (m, k) index and squared-distance arrays."""
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise InvalidInput(f"queries must have shape (m, 3), got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise InvalidInput("queries contain non-finite values")
        n = self.n
        if k < 1:
            raise InvalidInput(f"k must be positive, got {k}")
        if k > n:
            raise InvalidInput(f"k={k} exceeds cloud size {n}")

        # Over-query a small pad so that distance ties at the k boundary can
        # be resolved by index; distances are recomputed in our own
        # arithmetic so ordering never depends on the tree internals.
        k2 = min(n, k + 4)
        _, idx = self._tree.query(q, k=k2)
        idx = idx.reshape(q.shape[0], k2)

        # The tree reports index n where its distance computation overflowed
        # to infinity; fall back to an exhaustive scan for those rows.
        overflow = (idx >= n).any(axis=1)
        for row in np.flatnonzero(overflow):
            idx[row] = self._scan_row(q[row], k2)[0]
        with np.errstate(over="ignore"):
            sq = np.sum((q[:, None, :] - self._points[idx]) ** 2, axis=2)

        # Two stable sorts give (squared distance, index) lexicographic order.
        order = np.argsort(idx, axis=1, kind="stable")
        idx = np.take_along_axis(idx, order, axis=1)
        sq = np.take_along_axis(sq, order, axis=1)
        order = np.argsort(sq, axis=1, kind="stable")
        idx = np.take_along_axis(idx, order, axis=1)
        sq = np.take_along_axis(sq, order, axis=1)

        if k2 < n:
            # A tie stretching past the candidate set would hide lower-index
            # points; re-query those rows over the full tie radius.
            suspect = np.flatnonzero(sq[:, k - 1] >= sq[:, k2 - 1])
            for row in suspect:
                if not np.isfinite(sq[row, k - 1]):
                    idx[row, :k], sq[row, :k] = self._scan_row(q[row], k)
                    continue
                cand = self._tree.query_ball_point(
                    q[row], np.sqrt(sq[row, k - 1]) * (1.0 + 1e-12) + 1e-300
                )
                cand = np.array(sorted(cand), dtype=np.intp)
                csq = np.sum((q[row] - self._points[cand]) ** 2, axis=1)
                take = np.argsort(csq, axis=0, kind="stable")[:k]
                idx[row, :k] = cand[take]
                sq[row, :k] = csq[take]
        return idx[:, :k], sq[:, :k]

    def _scan_row(self, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        # Exhaustive (squared distance, index)-ordered scan; robust to inf.
        with np.errstate(over="ignore"):
            sq = np.sum((query - self._points) ** 2, axis=1)
        order = np.argsort(sq, kind="stable")[:k]
        return order, sq[order]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest single neighbor per query: (m,) indices and squared distances."""
        idx, sq = self.knn_batch(queries, 1)
        return idx[:, 0], sq[:, 0]


def build_index(cloud: PointCloud) -> NeighborIndex:
    """Build an exact nearest-neighbor index over the cloud's points."""
    return NeighborIndex(cloud)


def knn(index: NeighborIndex, query, k: int) -> list[tuple[int, float]]:
    """k nearest neighbors of a single 3D query point, distance-sorted."""
    return index.knn(query, k)


# ---------------------------------------------------------------------------
# File I/O: ASCII / binary-little-endian PLY and the SFB binary format.
# ---------------------------------------------------------------------------

_PLY_PROPS = ("x", "y", "z", "flow_x", "flow_y", "flow_z")
_PLY_TYPES = {"float": ("<f4", 4), "float32": ("<f4", 4),
              "double": ("<f8", 8), "float64": ("<f8", 8)}


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Load a point cloud from a PLY or SFB file.

    ``format`` is "ply" or "sfb"; when None it is inferred from the file
    suffix. Ground-truth flow channels are loaded when present.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    data = path.read_bytes()
    if fmt == "ply":
        return _parse_ply(data)
    if fmt == "sfb":
        return _parse_sfb(data)
    raise InvalidInput(f"unknown cloud format {fmt!r}")


def encode_cloud(cloud: PointCloud, format: str) -> bytes:
    """Serialize a cloud as "ply" (ASCII), "ply-binary" (double precision), or "sfb"."""
    if format == "ply":
        return _emit_ply_ascii(cloud)
    if format == "ply-binary":
        return _emit_ply_binary(cloud)
    if format == "sfb":
        return _emit_sfb(cloud)
    raise InvalidInput(f"unknown cloud format {format!r}")


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    """Write a cloud to disk; see encode_cloud for the supported formats."""
    path = Path(path)
    path.write_bytes(encode_cloud(cloud, format or _infer_format(path)))


def load_flow(path, format: str | None = None) -> FlowField:
    """Load a flow field stored as a 3-channel cloud file (vectors in x/y/z)."""
    cloud = load_cloud(path, format=format)
    return FlowField(cloud.points)


def save_flow(flow: FlowField, path) -> None:
    """Write a flow field as a 3-channel SFB file."""
    save_cloud(PointCloud(flow.vectors), path, format="sfb")


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix == ".sfb":
        return "sfb"
    raise InvalidInput(f"cannot infer cloud format from suffix {suffix!r}")


def _parse_ply(data: bytes) -> PointCloud:
    # Header is ASCII lines terminated by \n, binary or ASCII payload after
    # the end_header line.
    offset = 0
    lines: list[tuple[int, str]] = []
    while True:
        nl = data.find(b"\n", offset)
        if nl < 0:
            raise ParseError("unterminated PLY header", offset)
        try:
            text = data[offset:nl].decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII bytes in PLY header", offset) from None
        lines.append((offset, text))
        offset = nl + 1
        if text == "end_header":
            break

    if not lines or lines[0][1] != "ply":
        raise ParseError("missing 'ply' magic line", 0)

    fmt = None
    count = None
    props: list[tuple[str, str]] = []  # (type, name)
    in_vertex = False
    for line_off, text in lines[1:]:
        if not text or text.startswith("comment"):
            continue
        fields = text.split()
        if fields[0] == "format":
            if len(fields) != 3 or fields[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format line {text!r}", line_off)
            fmt = fields[1]
        elif fields[0] == "element":
            if len(fields) != 3 or fields[1] != "vertex":
                raise ParseError(f"unsupported PLY element {text!r}", line_off)
            try:
                count = int(fields[2])
            except ValueError:
                raise ParseError(f"bad vertex count {fields[2]!r}", line_off) from None
            if count < 1:
                raise ParseError("vertex count must be positive", line_off)
            in_vertex = True
        elif fields[0] == "property":
            if not in_vertex:
                raise ParseError("property before vertex element", line_off)
            if len(fields) != 3 or fields[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property {text!r}", line_off)
            if fields[2] not in _PLY_PROPS:
                raise ParseError(f"unknown property name {fields[2]!r}", line_off)
            props.append((fields[1], fields[2]))
        elif fields[0] == "end_header":
            break
        else:
            raise ParseError(f"unrecognized header line {text!r}", line_off)

    if fmt is None:
        raise ParseError("PLY header missing format line", 0)
    if count is None:
        raise ParseError("PLY header missing vertex element", 0)
    names = [name for _, name in props]
    if names[:3] != ["x", "y", "z"]:
        raise ParseError("PLY vertex must start with x, y, z properties", 0)
    has_flow = len(names) == 6
    if not has_flow and len(names) != 3:
        raise ParseError("PLY vertex must have 3 or 6 known properties", 0)
    if has_flow and names[3:] != ["flow_x", "flow_y", "flow_z"]:
        raise ParseError("flow properties must be flow_x, flow_y, flow_z", 0)

    if fmt == "ascii":
        values = _parse_ply_ascii_payload(data, offset, count, len(names))
    else:
        values = _parse_ply_binary_payload(data, offset, count, props)
    return _cloud_from_columns(values, has_flow, offset)


def _parse_ply_ascii_payload(data: bytes, offset: int, count: int, ncols: int) -> np.ndarray:
    out = np.empty((count, ncols), dtype=np.float64)
    pos = offset
    for row in range(count):
        nl = data.find(b"\n", pos)
        end = nl if nl >= 0 else len(data)
        if pos >= len(data):
            raise ParseError(f"truncated payload at vertex {row}", pos)
        fields = data[pos:end].split()
        if len(fields) != ncols:
            raise ParseError(
                f"vertex {row} has {len(fields)} values, expected {ncols}", pos
            )
        for col, tok in enumerate(fields):
            try:
                out[row, col] = float(tok)
            except ValueError:
                raise ParseError(f"bad float {tok!r}", pos) from None
        pos = end + 1
    return out


def _parse_ply_binary_payload(
    data: bytes, offset: int, count: int, props: list[tuple[str, str]]
) -> np.ndarray:
    dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in props])
    need = count * dtype.itemsize
    if len(data) - offset < need:
        raise ParseError(
            f"truncated payload: need {need} bytes, have {len(data) - offset}",
            len(data),
        )
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    out = np.column_stack([rec[name].astype(np.float64) for _, name in props])
    return out


def _cloud_from_columns(values: np.ndarray, has_flow: bool, payload_offset: int) -> PointCloud:
    bad = ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(
            f"non-finite value at vertex {row} column {col}", payload_offset
        )
    points = values[:, :3]
    flow = values[:, 3:6] if has_flow else None
    return PointCloud(points, gt_flow=flow)


def _format_coord(v: float) -> str:
    # 17 significant digits round-trips float64 exactly through ASCII.
    return format(v, ".17g")


def _emit_ply_ascii(cloud: PointCloud) -> bytes:
    props = ["property float x", "property float y", "property float z"]
    cols = [cloud.points]
    if cloud.gt_flow is not None:
        props += ["property float flow_x", "property float flow_y", "property float flow_z"]
        cols.append(cloud.gt_flow)
    header = "\n".join(
        ["ply", "format ascii 1.0", f"element vertex {cloud.n}"] + props + ["end_header"]
    )
    table = np.hstack(cols)
    body = "\n".join(" ".join(_format_coord(v) for v in row) for row in table)
    return (header + "\n" + body + "\n").encode("ascii")


def _emit_ply_binary(cloud: PointCloud) -> bytes:
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.gt_flow is not None:
        names += ["flow_x", "flow_y", "flow_z"]
        cols.append(cloud.gt_flow)
    props = [f"property double {n}" for n in names]
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.n}"]
        + props
        + ["end_header"]
    )
    table = np.ascontiguousarray(np.hstack(cols), dtype="<f8")
    return header.encode("ascii") + b"\n" + table.tobytes()


def _parse_sfb(data: bytes) -> PointCloud:
    if len(data) < 12:
        raise ParseError("SFB file shorter than its 12-byte header", len(data))
    if data[:4] != _SFB_MAGIC:
        raise ParseError(f"bad SFB magic {data[:4]!r}", 0)
    n, channels = struct.unpack_from("<II", data, 4)
    if n < 1:
        raise ParseError("SFB point count must be positive", 4)
    if channels not in (3, 6):
        raise ParseError(f"SFB channel count must be 3 or 6, got {channels}", 8)
    need = n * channels * 4
    if len(data) - 12 < need:
        raise ParseError(
            f"truncated SFB payload: need {need} bytes, have {len(data) - 12}",
            len(data),
        )
    values = np.frombuffer(data, dtype="<f4", count=n * channels, offset=12)
    values = values.reshape(n, channels).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(
            f"non-finite value at point {row} channel {col}",
            12 + int(row * channels + col) * 4,
        )
    flow = values[:, 3:6] if channels == 6 else None
    return PointCloud(values[:, :3], gt_flow=flow)


def _emit_sfb(cloud: PointCloud) -> bytes:
    cols = [cloud.points] if cloud.gt_flow is None else [cloud.points, cloud.gt_flow]
    table = np.ascontiguousarray(np.hstack(cols), dtype="<f4")
    channels = table.shape[1]
    header = _SFB_MAGIC + struct.pack("<II", cloud.n, channels)
    return header + table.tobytes()
