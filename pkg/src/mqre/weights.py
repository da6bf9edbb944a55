"""Within-cluster rescaling of conditional unit-level sampling weights.

Method 2 makes the weights sum to the cluster sample size; method 1 makes
them sum to the cluster's effective sample size ``(sum w)^2 / sum w^2``.
Both are invariant to multiplying the input weights by a constant.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .design import ClusterBlock, GroupedDesign

__all__ = ["WeightScaling", "scale_weights", "scale_design"]


class WeightScaling(str, Enum):
    NONE = "none"
    METHOD1 = "method1"
    METHOD2 = "method2"


def _scale_vector(w: np.ndarray, method: WeightScaling) -> np.ndarray:
    if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
        raise ValueError("unit weights must be finite and positive")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("unit weights sum to zero")
    if method is WeightScaling.NONE:
        return w.copy()
    if method is WeightScaling.METHOD2:
        return w * (w.size / total)
    return w * (total / float((w * w).sum()))


def scale_weights(block: ClusterBlock, method: WeightScaling) -> np.ndarray:
    """Rescaled copy of one cluster's unit weights."""
    return _scale_vector(np.asarray(block.w1, dtype=float), WeightScaling(method))


def scale_design(design: GroupedDesign, method: WeightScaling) -> GroupedDesign:
    """Design with every cluster's unit weights rescaled independently."""
    method = WeightScaling(method)
    if method is WeightScaling.NONE:
        return design
    w1 = np.concatenate([_scale_vector(blk.w1, method) for blk in design.clusters])
    return design.with_weights(w1=w1, w2=design.w2)
