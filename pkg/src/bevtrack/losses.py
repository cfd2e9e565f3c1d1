"""Training losses: penalty-reduced focal loss on center heatmaps, masked L1
on 3D displacements, and masked L1 on sparse depth, plus their weighted sum.

All functions accept torch tensors or numpy arrays (converted via
``torch.as_tensor``) and return 0-dim torch tensors, so they are usable both
inside the training graph and directly from tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import TargetMaps
from .errors import ValidationError
from .geometry import SparseDepthMap


@dataclass(frozen=True)
class FocalParams:
    """Exponents of the penalty-reduced focal loss."""

    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError(f"focal exponents must be positive, got {self}")


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for (objectness, displacement, depth)."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValidationError(f"loss weights must be nonnegative, got {self}")
        if self.alpha1 == self.alpha2 == self.alpha3 == 0:
            raise ValidationError("at least one loss weight must be nonzero")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def focal_loss(pred, gt, params: FocalParams = FocalParams()) -> torch.Tensor:
    """Penalty-reduced focal loss over a center heatmap.

    Peak cells (gt == 1) contribute -(1-p)^alpha log p; all other cells
    contribute -(1-gt)^beta p^alpha log(1-p). Normalized by the number of
    peak cells, floored at one. Predictions must lie strictly inside (0, 1);
    clamping is the caller's responsibility.
    """
    pred = _as_tensor(pred)
    gt = _as_tensor(gt).to(pred.dtype)
    if pred.shape != gt.shape:
        raise ValidationError(f"focal loss shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if bool((pred <= 0).any()) or bool((pred >= 1).any()):
        raise ValidationError("focal loss predictions must lie strictly inside (0, 1)")

    pos = gt == 1.0
    pos_term = torch.where(pos, (1 - pred) ** params.alpha * torch.log(pred),
                           torch.zeros((), dtype=pred.dtype))
    neg_term = torch.where(~pos, (1 - gt) ** params.beta * pred ** params.alpha
                           * torch.log(1 - pred), torch.zeros((), dtype=pred.dtype))
    num_pos = max(1, int(pos.sum()))
    return -(pos_term.sum() + neg_term.sum()) / num_pos


def displacement_loss(pred_disp, gt: TargetMaps, z_weight: float = 1.0) -> torch.Tensor:
    """Mean L1 norm of the 3-vector displacement error over supervised cells.

    (du, dv) are in output-grid cells and dz in meters; `z_weight` rescales
    the depth component inside the L1 to balance the mixed units. Returns 0
    when no cell is supervised.
    """
    pred = _as_tensor(pred_disp)
    mask = torch.as_tensor(gt.displacement_mask)
    target = torch.as_tensor(gt.displacement).to(pred.dtype)
    if pred.shape != target.shape:
        raise ValidationError(
            f"displacement shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    n = int(mask.sum())
    if n == 0:
        return pred.sum() * 0.0
    weights = torch.tensor([1.0, 1.0, z_weight], dtype=pred.dtype)
    err = ((pred - target).abs() * weights).sum(dim=-1)
    return err[mask].sum() / n


def depth_loss(pred_depth, gt: SparseDepthMap) -> torch.Tensor:
    """Mean absolute depth error over cells with a LiDAR return; 0 if none."""
    pred = _as_tensor(pred_depth)
    if pred.ndim == 3 and pred.shape[-1] == 1:
        pred = pred[..., 0]
    target = torch.as_tensor(gt.values).to(pred.dtype)
    if pred.shape != target.shape:
        raise ValidationError(
            f"depth shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    mask = torch.as_tensor(gt.valid)
    n = int(mask.sum())
    if n == 0:
        return pred.sum() * 0.0
    return (pred - target).abs()[mask].sum() / n


def total_loss(components, weights: LossWeights = LossWeights()):
    """Weighted sum of (objectness, displacement, depth) loss components.

    Returns (total, breakdown) where breakdown echoes the inputs and the
    total as plain floats; the total keeps its tensor type when the inputs
    carry gradients.
    """
    def scalar(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    l_obj, l_disp, l_depth = components
    total = weights.alpha1 * l_obj + weights.alpha2 * l_disp + weights.alpha3 * l_depth
    breakdown = {
        "obj": scalar(l_obj),
        "disp": scalar(l_disp),
        "depth": scalar(l_depth),
        "total": scalar(total),
    }
    return total, breakdown
