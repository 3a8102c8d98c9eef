"""Relaxed entropic optimal transport solved by alternating diagonal scaling.

The solver runs in the ordinary (non-log) domain. The marginal relaxation
enters through the exponent lam / (lam + eps) applied to each scaling
update; with one iteration this matches the estimation procedure the rest
of the pipeline is built around, and with many iterations and a large lam
the row sums tighten to hard uniform marginals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTransport, InvalidInput
from .features import CostMatrix


@dataclass
class TransportConfig:
    epsilon: float = 0.03
    lam: float = 10.0
    iterations: int = 1
    epsilon_offset: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0 or self.epsilon_offset < 0:
            raise InvalidInput("epsilon and epsilon_offset must be nonnegative")
        if self.epsilon + self.epsilon_offset <= 0:
            raise InvalidInput("epsilon + epsilon_offset must be positive")
        if self.lam < 0:
            raise InvalidInput(f"lam must be nonnegative, got {self.lam}")
        if self.iterations < 1:
            raise InvalidInput(f"iterations must be >= 1, got {self.iterations}")

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon + self.epsilon_offset


@dataclass
class TransportPlan:
    """Nonnegative mass matrix (n_s, n_t)."""

    mass: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.ndim != 2:
            raise InvalidInput(f"plan must be 2D, got shape {self.mass.shape}")
        if not np.all(np.isfinite(self.mass)) or np.any(self.mass < 0):
            raise InvalidInput("plan entries must be finite and nonnegative")
        self.mass.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mass.shape


def sinkhorn(cost: CostMatrix, cfg: TransportConfig) -> TransportPlan:
    """Estimate the transport plan from a gated cost matrix.

    kernel = exp(-C / eps') with zero on gated pairs, eps' = epsilon +
    epsilon_offset; then ``iterations`` rounds of

        b = ((1/n_t) / (K^T a)) ** (lam / (lam + eps'))
        a = ((1/n_s) / (K b))   ** (lam / (lam + eps'))

    starting from a = (1/n_s) 1, returning diag(a) K diag(b). Rectangular
    inputs use per-side uniform masses 1/n_s and 1/n_t.

    Source rows with no target inside the gate radius cannot exchange mass;
    they are excluded from the scaling and receive uniform mass
    1 / (n_s * n_t) over all targets, to be treated downstream as
    zero-confidence matches. Any other zero row or column of the kernel
    (for example through exp underflow at a too-small epsilon) raises
    DegenerateTransport instead of being silently clamped.
    """
    eps = cfg.effective_epsilon
    power = cfg.lam / (cfg.lam + eps)
    n_s, n_t = cost.shape

    kernel = np.exp(-cost.cost / eps)
    kernel[cost.gated] = 0.0

    fallback = cost.fully_gated_rows
    active = ~fallback
    ka = kernel[active]
    row_ids = np.flatnonzero(active)

    mass = np.empty((n_s, n_t), dtype=np.float64)
    mass[fallback] = 1.0 / (n_s * n_t)
    if ka.shape[0] == 0:
        return TransportPlan(mass)

    a = np.full(ka.shape[0], 1.0 / n_s)
    b = np.ones(n_t)
    for _ in range(cfg.iterations):
        ta = ka.T @ a
        zero = ta == 0.0
        if zero.any():
            raise DegenerateTransport("column", int(np.flatnonzero(zero)[0]))
        b = ((1.0 / n_t) / ta) ** power
        tb = ka @ b
        zero = tb == 0.0
        if zero.any():
            raise DegenerateTransport("row", int(row_ids[np.flatnonzero(zero)[0]]))
        a = ((1.0 / n_s) / tb) ** power

    mass[active] = a[:, None] * ka * b[None, :]
    return TransportPlan(mass)


def marginals(plan: TransportPlan) -> tuple[np.ndarray, np.ndarray]:
    """Row and column sums of the plan (the relaxed marginals diagnostic)."""
    return plan.mass.sum(axis=1), plan.mass.sum(axis=0)
