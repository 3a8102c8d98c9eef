"""End-to-end estimation for one scene pair, with chunked full-resolution inference.

The stage sequence is: features -> gated cost -> transport -> soft
correspondence (initial flow + confidence) -> optional residual
refinement, with loss reports and metrics bracketing the refinement.

Chunked mode shuffles the source with a seeded PCG64 generator, splits it
into fixed-size chunks (the last padded by resampling source points with
replacement), computes each chunk's cost against the full-resolution
target features, and gathers the per-chunk flows back into source order
before a single full-resolution refinement. When the source fits in one
chunk the direct path is used, so both entry points coincide exactly.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .cloud import FlowField, PointCloud, build_index
from .errors import InvalidInput
from .evaluation import MetricReport, metrics
from .features import FeatureMatrix, FeatureProvider, XyzCentered, cost_matrix, extract_features
from .flowinit import CorrespondenceConfig, correspond
from .objective import LossConfig, LossReport, evaluate_losses
from .refine import RefineConfig, RefineTrace, refine
from .transport import TransportConfig, sinkhorn


@dataclass
class PipelineConfig:
    provider: FeatureProvider = field(default_factory=XyzCentered)
    gate_radius: float = 10.0
    transport: TransportConfig = field(default_factory=TransportConfig)
    correspondence: CorrespondenceConfig = field(default_factory=CorrespondenceConfig)
    refine: RefineConfig | None = field(default_factory=RefineConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    chunk_size: int = 2048
    seed: int = 0
    unit_confidence: bool = False

    def __post_init__(self):
        if self.chunk_size < 1:
            raise InvalidInput(f"chunk_size must be positive, got {self.chunk_size}")
        if self.gate_radius <= 0:
            raise InvalidInput(f"gate_radius must be positive, got {self.gate_radius}")


@dataclass
class ScenePairResult:
    initial_flow: FlowField
    confidence: np.ndarray
    refined_flow: FlowField | None
    refine_trace: RefineTrace | None
    loss_initial: LossReport
    loss_refined: LossReport | None
    metrics_initial: MetricReport | None
    metrics_refined: MetricReport | None
    timings_ms: dict[str, float]
    total_ms: float

    @property
    def final_flow(self) -> FlowField:
        return self.refined_flow if self.refined_flow is not None else self.initial_flow


@contextmanager
def _stage(timings: dict[str, float], name: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[name] = timings.get(name, 0.0) + (time.perf_counter() - start) * 1e3


def _correspondence_pass(chunk: PointCloud, chunk_indices, y: PointCloud,
                         target_features: FeatureMatrix, cfg: PipelineConfig,
                         timings: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    """features -> cost -> transport -> correspondence for one source chunk.

    Returns the chunk's flow vectors and confidence values.
    """
    with _stage(timings, "features"):
        fs = extract_features(cfg.provider, chunk, indices=chunk_indices, role="source")
    with _stage(timings, "cost"):
        cm = cost_matrix(fs, target_features, chunk, y, cfg.gate_radius)
    with _stage(timings, "transport"):
        plan = sinkhorn(cm, cfg.transport)
    with _stage(timings, "correspondence"):
        corr = correspond(chunk, y, plan, cm, cfg.correspondence)
    return corr.initial_flow.vectors, corr.confidence


def _finalize(x: PointCloud, y: PointCloud, flow: FlowField, p: np.ndarray,
              cfg: PipelineConfig, timings: dict[str, float],
              t_start: float) -> ScenePairResult:
    """Losses, optional refinement, and metrics shared by both entry points."""
    with _stage(timings, "losses"):
        target_index = build_index(y)
        source_index = build_index(x)
        loss_initial = evaluate_losses(
            x, y, flow, p, cfg.loss,
            target_index=target_index, source_index=source_index,
        )

    refined = None
    trace = None
    loss_refined = None
    if cfg.refine is not None:
        with _stage(timings, "refine"):
            trace = refine(x, y, flow, p, cfg.refine)
            refined = trace.refined_flow
        with _stage(timings, "losses"):
            loss_refined = evaluate_losses(
                x, y, refined, p, cfg.loss,
                target_index=target_index, source_index=source_index,
            )

    metrics_initial = None
    metrics_refined = None
    if x.gt_flow is not None:
        with _stage(timings, "metrics"):
            gt = FlowField(x.gt_flow)
            metrics_initial = metrics(flow, gt)
            if refined is not None:
                metrics_refined = metrics(refined, gt)

    total_ms = (time.perf_counter() - t_start) * 1e3
    return ScenePairResult(
        initial_flow=flow,
        confidence=p,
        refined_flow=refined,
        refine_trace=trace,
        loss_initial=loss_initial,
        loss_refined=loss_refined,
        metrics_initial=metrics_initial,
        metrics_refined=metrics_refined,
        timings_ms=timings,
        total_ms=total_ms,
    )


def estimate(x: PointCloud, y: PointCloud, cfg: PipelineConfig) -> ScenePairResult:
    """Run the full stage sequence on a scene pair in one pass."""
    t_start = time.perf_counter()
    timings: dict[str, float] = {}
    vectors, p = _correspondence_pass(x, None, y, _target_features(y, cfg, timings), cfg, timings)
    if cfg.unit_confidence:
        p = np.ones(x.n)
    return _finalize(x, y, FlowField(vectors), p, cfg, timings, t_start)


def _target_features(y: PointCloud, cfg: PipelineConfig,
                     timings: dict[str, float]) -> FeatureMatrix:
    with _stage(timings, "features"):
        return extract_features(cfg.provider, y, role="target")


def estimate_chunked(x: PointCloud, y: PointCloud, cfg: PipelineConfig) -> ScenePairResult:
    """Full-resolution inference over fixed-size source chunks.

    The source order is shuffled with the configured seed; each chunk's
    matching cost is computed against all target points. Padded slots are
    sampled with replacement from the source and their flows discarded, so
    the output flow length always equals the source count. Refinement runs
    once at full resolution.
    """
    if x.n <= cfg.chunk_size:
        return estimate(x, y, cfg)

    t_start = time.perf_counter()
    timings: dict[str, float] = {}
    target_features = _target_features(y, cfg, timings)

    with _stage(timings, "chunking"):
        rng = np.random.default_rng(cfg.seed)
        perm = rng.permutation(x.n)
        n_chunks = -(-x.n // cfg.chunk_size)
        pad_count = n_chunks * cfg.chunk_size - x.n
        pad = rng.integers(0, x.n, size=pad_count)
        slots = np.concatenate([perm, pad]).reshape(n_chunks, cfg.chunk_size)

    flows = np.empty((n_chunks * cfg.chunk_size, 3))
    confs = np.empty(n_chunks * cfg.chunk_size)
    for c in range(n_chunks):
        idx = slots[c]
        chunk = PointCloud(x.points[idx])
        f_c, p_c = _correspondence_pass(chunk, idx, y, target_features, cfg, timings)
        flows[c * cfg.chunk_size:(c + 1) * cfg.chunk_size] = f_c
        confs[c * cfg.chunk_size:(c + 1) * cfg.chunk_size] = p_c

    with _stage(timings, "chunking"):
        vectors = np.empty((x.n, 3))
        p = np.empty(x.n)
        vectors[perm] = flows[: x.n]
        p[perm] = confs[: x.n]
    if cfg.unit_confidence:
        p = np.ones(x.n)
    return _finalize(x, y, FlowField(vectors), p, cfg, timings, t_start)
