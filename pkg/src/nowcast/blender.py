"""Blend the attention model's forecast with persistence using rescaled
rain-probability maps.

Later hours' probability maps run systematically low, so each hour is
rescaled by the ratio of the hour-0 map's 99th percentile to its own,
then clipped to [0, 1].  The blend itself is a pixelwise convex
combination: W * model + (1 - W) * persistence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMap, ShapeMismatch
from .grids import ForecastBundle


@dataclass(frozen=True)
class BlendWeights:
    """Per-hour blending maps in [0, 1] plus the rescale factors applied."""

    w: np.ndarray                 # [T, H, W]
    rescale_factors: tuple

    def __post_init__(self):
        w = np.asarray(self.w)
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("blend weights must lie in [0, 1]")


def rescale_probabilities(prob_maps) -> BlendWeights:
    """Rescale hour h by q99(hour 0)/q99(hour h), clipped to [0, 1]."""
    p = np.asarray(prob_maps, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeMismatch("probability maps must be [T, H, W]")
    q = [float(np.quantile(p[h], 0.99)) for h in range(p.shape[0])]
    if any(v <= 0 for v in q):
        raise DegenerateMap(f"q99 of a probability map is non-positive: {q}")
    factors = tuple(q[0] / v for v in q)
    w = np.clip(p * np.asarray(factors)[:, None, None], 0.0, 1.0)
    return BlendWeights(w, factors)


def blend(weights: BlendWeights, model_pred, persistence_pred) -> ForecastBundle:
    """Pixelwise convex combination of model and persistence forecasts."""
    model = model_pred.predictions if isinstance(model_pred, ForecastBundle) else np.asarray(model_pred)
    pers = persistence_pred.predictions if isinstance(persistence_pred, ForecastBundle) else np.asarray(persistence_pred)
    if model.shape != pers.shape or model.shape != weights.w.shape:
        raise ShapeMismatch("blend inputs must share one [T, H, W] shape")
    out = weights.w * model + (1.0 - weights.w) * pers
    anchor = model_pred.anchor if isinstance(model_pred, ForecastBundle) else 0
    return ForecastBundle(out.astype(np.float32), None, "blended", anchor)
