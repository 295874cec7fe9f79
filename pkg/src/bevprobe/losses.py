"""Penalty-reduced focal loss for Gaussian center heatmaps.

Cells whose target is exactly 1 are positives and contribute
(1 - p)^alpha * (-log p); every other cell contributes
(1 - t)^beta * p^alpha * (-log(1 - p)), so cells near a center are
progressively down-weighted. The sum is normalized by the positive count
(at least 1). Predictions are clamped away from {0, 1} so the loss stays
finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bev_grid import Heatmap


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    epsilon: float = 1e-12

    def __post_init__(self) -> None:
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")


def gaussian_focal_loss(
    pred: Heatmap, target: Heatmap, cfg: LossConfig = LossConfig()
) -> float:
    """Focal loss of a predicted heatmap against a Gaussian target.

    Finite for any valid inputs, including predictions saturated at 0 or 1.
    """
    if pred.spec != target.spec:
        raise ValueError("prediction and target grids do not match")
    p = np.clip(pred.values.astype(np.float64), cfg.epsilon, 1.0 - cfg.epsilon)
    t = target.values.astype(np.float64)
    pos = t == 1.0
    pos_terms = (1.0 - p[pos]) ** cfg.alpha * (-np.log(p[pos]))
    neg = ~pos
    neg_terms = (
        (1.0 - t[neg]) ** cfg.beta * p[neg] ** cfg.alpha * (-np.log1p(-p[neg]))
    )
    total = float(pos_terms.sum()) + float(neg_terms.sum())
    return total / max(1, int(pos.sum()))


def multi_stage_loss(
    preds: Sequence[Heatmap], targets: Sequence[Heatmap],
    cfg: LossConfig = LossConfig(),
) -> float:
    """Sum of per-stage focal losses over aligned prediction/target lists."""
    if len(preds) != len(targets):
        raise ValueError(
            f"{len(preds)} predictions for {len(targets)} targets"
        )
    return sum(gaussian_focal_loss(p, t, cfg) for p, t in zip(preds, targets))
