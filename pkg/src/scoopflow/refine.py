"""Run-time residual flow refinement.

Directly optimizes a per-point residual R added to the initial flow,
minimizing the confidence-weighted distance of the warped source to the
target plus a weighted flow-smoothness term:

    (1/n) sum_i p_i min_j |x_i + f_i + r_i - y_j|^2
    + lambda_flow (1/(n k_f)) sum_i sum_{l in N(i)} |(f_i+r_i) - (f_l+r_l)|_1

Source neighborhoods depend only on X and are computed once per run;
nearest-target assignments are recomputed at every gradient evaluation and
treated as piecewise constant. Gradients replace each |t| with
sqrt(t^2 + delta^2); reported objective values use the exact L1.

The optimizer is a self-contained ADAM recursion with bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import FlowField, NeighborIndex, PointCloud, build_index
from .errors import InvalidInput, NumericalDivergence, ShapeMismatch
from .objective import smoothness_neighborhoods


@dataclass
class RefineConfig:
    lambda_flow: float = 1.0
    k_f: int = 32
    steps: int = 150
    update_rate: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    smoothness_delta: float = 1e-9

    def __post_init__(self):
        if self.lambda_flow < 0:
            raise InvalidInput("lambda_flow must be nonnegative")
        if self.k_f < 1:
            raise InvalidInput(f"k_f must be positive, got {self.k_f}")
        if self.steps < 0:
            raise InvalidInput(f"steps must be nonnegative, got {self.steps}")
        if self.update_rate <= 0:
            raise InvalidInput("update_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidInput("beta1 and beta2 must lie in (0, 1)")
        if self.adam_epsilon <= 0 or self.smoothness_delta <= 0:
            raise InvalidInput("adam_epsilon and smoothness_delta must be positive")


@dataclass
class RefineTrace:
    objectives: np.ndarray      # (steps + 1,), exact objective incl. start
    residual: np.ndarray        # (n, 3) final R
    refined_flow: FlowField     # F + R


def _check_shapes(x: PointCloud, flow: FlowField, residual: np.ndarray,
                  confidence: np.ndarray) -> np.ndarray:
    residual = np.asarray(residual, dtype=np.float64)
    if flow.n != x.n:
        raise ShapeMismatch(f"flow has {flow.n} vectors for {x.n} points")
    if residual.shape != (x.n, 3):
        raise ShapeMismatch(f"residual shape {residual.shape}, expected ({x.n}, 3)")
    if np.asarray(confidence).shape != (x.n,):
        raise ShapeMismatch(f"confidence must have shape ({x.n},)")
    return residual


def refine_objective(x: PointCloud, flow: FlowField, residual, confidence,
                     target_index: NeighborIndex, cfg: RefineConfig,
                     smoothed: bool = False,
                     neighborhoods: np.ndarray | None = None) -> float:
    """Refinement objective at the given residual.

    ``smoothed`` evaluates the delta-smoothed L1 (the function the gradient
    differentiates); the default is the exact objective.
    """
    residual = _check_shapes(x, flow, residual, confidence)
    p = np.asarray(confidence, dtype=np.float64)
    total_flow = flow.vectors + residual
    warped = x.points + total_flow
    idx, _ = target_index.nearest(warped)
    # Overflow to inf is tolerated; the optimizer reports it as divergence.
    with np.errstate(over="ignore"):
        sq = np.sum((warped - target_index.points[idx]) ** 2, axis=1)
        dist = float(np.mean(p * sq))

    if neighborhoods is None:
        neighborhoods = smoothness_neighborhoods(build_index(x), cfg.k_f)
    diffs = total_flow[:, None, :] - total_flow[neighborhoods]
    if smoothed:
        vals = np.sqrt(diffs * diffs + cfg.smoothness_delta**2)
    else:
        vals = np.abs(diffs)
    smooth = float(vals.sum() / (x.n * cfg.k_f))
    return dist + cfg.lambda_flow * smooth


def refine_gradient(x: PointCloud, flow: FlowField, residual, confidence,
                    target_index: NeighborIndex, cfg: RefineConfig,
                    neighborhoods: np.ndarray | None = None,
                    nn_indices: np.ndarray | None = None) -> np.ndarray:
    """Analytic gradient of the smoothed objective with respect to the residual.

    The nearest-target assignment is recomputed here (unless supplied) and
    held constant; gradients flow through the squared distance only. Each
    directed neighbor pair contributes opposite-sign smoothed-sign terms to
    both endpoints. Accumulation order is fixed, so results are
    bit-reproducible.
    """
    residual = _check_shapes(x, flow, residual, confidence)
    p = np.asarray(confidence, dtype=np.float64)
    total_flow = flow.vectors + residual
    warped = x.points + total_flow
    if nn_indices is None:
        nn_indices, _ = target_index.nearest(warped)
    grad = (2.0 / x.n) * p[:, None] * (warped - target_index.points[nn_indices])

    if cfg.lambda_flow > 0:
        if neighborhoods is None:
            neighborhoods = smoothness_neighborhoods(build_index(x), cfg.k_f)
        coeff = cfg.lambda_flow / (x.n * cfg.k_f)
        diffs = total_flow[:, None, :] - total_flow[neighborhoods]
        signs = diffs / np.sqrt(diffs * diffs + cfg.smoothness_delta**2)
        grad += coeff * signs.sum(axis=1)
        np.subtract.at(grad, neighborhoods.ravel(),
                       coeff * signs.reshape(-1, 3))
    return grad


def refine(x: PointCloud, y: PointCloud, flow: FlowField, confidence,
           cfg: RefineConfig) -> RefineTrace:
    """Optimize the residual with ADAM for cfg.steps updates.

    The residual starts at zero; with steps = 0 the refined flow equals the
    initial flow. Raises NumericalDivergence if the objective or gradient
    turns non-finite at any step.
    """
    residual = np.zeros((x.n, 3))
    _check_shapes(x, flow, residual, confidence)
    target_index = build_index(y)
    neighborhoods = smoothness_neighborhoods(build_index(x), cfg.k_f)

    objectives = np.empty(cfg.steps + 1)
    objectives[0] = refine_objective(
        x, flow, residual, confidence, target_index, cfg, neighborhoods=neighborhoods
    )
    if not np.isfinite(objectives[0]):
        raise NumericalDivergence(0)

    m = np.zeros_like(residual)
    v = np.zeros_like(residual)
    for step in range(1, cfg.steps + 1):
        grad = refine_gradient(
            x, flow, residual, confidence, target_index, cfg,
            neighborhoods=neighborhoods,
        )
        if not np.all(np.isfinite(grad)):
            raise NumericalDivergence(step, "gradient")
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
        residual = residual - cfg.update_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
        objectives[step] = refine_objective(
            x, flow, residual, confidence, target_index, cfg,
            neighborhoods=neighborhoods,
        )
        if not np.isfinite(objectives[step]):
            raise NumericalDivergence(step)

    return RefineTrace(
        objectives=objectives,
        residual=residual,
        refined_flow=FlowField(flow.vectors + residual),
    )
