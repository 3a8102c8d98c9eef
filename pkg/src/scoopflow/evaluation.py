"""Scene-flow evaluation metrics: EPE, strict/relaxed accuracy, outliers.

Accuracy and outlier thresholds use strict comparisons. Where the
ground-truth flow has zero norm the relative error is +inf unless the
prediction is exact (then 0), so accuracy there depends only on the
absolute-error branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import FlowField
from .errors import InvalidInput, ShapeMismatch


@dataclass
class MetricReport:
    epe: float
    as_pct: float
    ar_pct: float
    out_pct: float
    n_evaluated: int

    def to_json_dict(self) -> dict:
        return {
            "epe": self.epe,
            "as": self.as_pct,
            "ar": self.ar_pct,
            "out": self.out_pct,
            "n": self.n_evaluated,
        }


def point_errors(pred: FlowField, gt: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Per-point absolute and relative flow errors."""
    if pred.n != gt.n:
        raise ShapeMismatch(f"prediction has {pred.n} vectors, ground truth {gt.n}")
    e = np.linalg.norm(pred.vectors - gt.vectors, axis=1)
    gt_norm = np.linalg.norm(gt.vectors, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_rel = np.where(
            gt_norm > 0.0, e / gt_norm, np.where(e > 0.0, np.inf, 0.0)
        )
    return e, e_rel


def metrics(pred: FlowField, gt: FlowField) -> MetricReport:
    """EPE plus strict accuracy (5 cm / 5%), relaxed accuracy (10 cm / 10%),
    and outliers (30 cm / 10%), all with strict threshold comparisons."""
    e, e_rel = point_errors(pred, gt)
    n = e.shape[0]
    if n == 0:
        raise InvalidInput("cannot evaluate metrics on an empty flow")
    acc_strict = (e < 0.05) | (e_rel < 0.05)
    acc_relaxed = (e < 0.1) | (e_rel < 0.10)
    outlier = (e > 0.3) | (e_rel > 0.10)
    return MetricReport(
        epe=float(np.mean(e)),
        as_pct=float(100.0 * np.mean(acc_strict)),
        ar_pct=float(100.0 * np.mean(acc_relaxed)),
        out_pct=float(100.0 * np.mean(outlier)),
        n_evaluated=int(n),
    )
