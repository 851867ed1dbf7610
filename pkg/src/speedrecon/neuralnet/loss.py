from __future__ import annotations

import torch

from ..grid import V_MAX, V_MIN, V_SHIFT, V_VAR


def masked_imae_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-sample IMAE in h/km.

    ``pred`` holds normalized network outputs, ``target`` km/h. Predictions
    are denormalized and clamped to [3, 130] km/h before inversion. Samples
    without any target cell are left out of the mean.

    The clamp is straight-through: values are clamped but the gradient is
    passed unchanged, so outputs that drift out of range still get pulled
    back instead of receiving zero gradient.
    """
    raw = pred * V_VAR + V_SHIFT
    v = raw + (torch.clamp(raw, V_MIN, V_MAX) - raw).detach()
    m = mask.to(pred.dtype)
    gt = torch.where(mask, target, torch.ones_like(target))
    err = (1.0 / v - 1.0 / gt).abs() * m
    count = m.flatten(1).sum(1)
    valid = count > 0
    if not bool(valid.any()):
        return pred.sum() * 0.0
    per_sample = err.flatten(1).sum(1)[valid] / count[valid]
    return per_sample.mean()
