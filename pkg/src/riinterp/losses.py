"""Charbonnier training objectives for the flow estimator and the synthesis networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nd
from .nd import Tensor

EPSILON = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 1.0
    epsilon: float = EPSILON

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0 or self.epsilon <= 0:
            raise ValueError("loss weights and epsilon must be positive")


def charbonnier(x: Tensor, eps: float = EPSILON) -> Tensor:
    return nd.charbonnier(x, eps)


def _masked_penalty(pred: Tensor, target: Tensor, mask, eps: float, per_pixel: bool) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = nd.cast(pred, np.float64) - nd.cast(target, np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    total = nd.tsum(charbonnier(diff, eps) * m)
    if per_pixel:
        count = max(float(np.asarray(mask, dtype=bool).sum()), 1.0)
        total = total * (1.0 / count)
    return total


def flow_loss(warped_pyr: Sequence[Tensor], target_pyr: Sequence[Tensor], masks: Sequence,
              eps: float = EPSILON, per_pixel: bool = False) -> Tensor:
    """(1/L) * sum over levels of sum_x mask * f(warped - target).

    With ``per_pixel`` each level's sum is divided by its valid-pixel count.
    """
    if not (len(warped_pyr) == len(target_pyr) == len(masks)) or not warped_pyr:
        raise ValueError("flow_loss needs equal, nonzero level counts")
    levels = [_masked_penalty(w, t, m, eps, per_pixel) for w, t, m in zip(warped_pyr, target_pyr, masks)]
    total = levels[0]
    for lv in levels[1:]:
        total = total + lv
    return total * (1.0 / len(levels))


def interp_loss(coarse: Tensor, fine: Tensor, gt: Tensor, gt_mask, w: LossWeights = LossWeights(),
                per_pixel: bool = False) -> Tensor:
    """lambda1 * sum mask*f(coarse - gt) + lambda2 * sum mask*f(fine - gt)."""
    first = _masked_penalty(coarse, gt, gt_mask, w.epsilon, per_pixel)
    second = _masked_penalty(fine, gt, gt_mask, w.epsilon, per_pixel)
    return first * w.lambda1 + second * w.lambda2
