"""Training losses: soft Dice for the two masks, binary cross-entropy for
the diagnosis, and their weighted combination.

All functions accept either numpy arrays or torch tensors and compute with
the matching backend, so the same formulas serve fast numpy evaluation and
autograd-backed training.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import MissingGroundTruth, ShapeMismatch

DICE_SMOOTH = 1e-6
BCE_CLAMP = 1e-7


def _is_torch(x):
    return isinstance(x, torch.Tensor)


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the three loss terms."""

    w_od: float = 1.0
    w_cp: float = 1.0
    w_cls: float = 1.0

    def __post_init__(self):
        if min(self.w_od, self.w_cp, self.w_cls) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_od == self.w_cp == self.w_cls == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    """Per-term losses and their weighted total (floats or 0-dim tensors)."""

    l_od: object
    l_cp: object
    l_cls: object
    total: object

    def as_floats(self):
        def _scalar(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(*(_scalar(v) for v in (self.l_od, self.l_cp, self.l_cls, self.total)))


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice(pred, target):
    """Smoothed overlap 2*sum(r*y)/(sum(r)+sum(y)) between a soft mask and
    a binary mask, summed over every element.

    Both masks empty scores 1 by the smoothing term.
    """
    _check_same_shape(pred, target)
    if _is_torch(pred) or _is_torch(target):
        pred = torch.as_tensor(pred)
        target = torch.as_tensor(target, dtype=pred.dtype)
    inter = (pred * target).sum()
    return (2.0 * inter + DICE_SMOOTH) / (pred.sum() + target.sum() + DICE_SMOOTH)


def dice_loss(pred, target):
    """1 - soft_dice; differentiable everywhere thanks to the smoothing."""
    return 1.0 - soft_dice(pred, target)


def bce(p, label):
    """Binary cross-entropy -[y*ln(p) + (1-y)*ln(1-p)], elementwise.

    Probabilities are clamped to [BCE_CLAMP, 1-BCE_CLAMP] so boundary
    inputs stay finite.
    """
    if _is_torch(p) or _is_torch(label):
        p = torch.as_tensor(p)
        label = torch.as_tensor(label, dtype=p.dtype)
        p = torch.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
        return -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p))
    p = np.clip(np.asarray(p, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    label = np.asarray(label, dtype=float)
    out = -(label * np.log(p) + (1.0 - label) * np.log1p(-p))
    return out if out.ndim else float(out)


def _batched(mask):
    """View a mask as (B, -1); a single unbatched mask becomes B=1."""
    if mask.ndim <= 2:
        return mask.reshape(1, -1)
    return mask.reshape(mask.shape[0], -1)


def _per_sample_dice_loss(pred, target):
    _check_same_shape(pred, target)
    p = _batched(pred)
    t = _batched(target)
    inter = (p * t).sum(1)
    dice = (2.0 * inter + DICE_SMOOTH) / (p.sum(1) + t.sum(1) + DICE_SMOOTH)
    return 1.0 - dice


def total_loss(outputs, targets, weights=LossWeights()):
    """Combine the three loss terms over a batch.

    ``outputs`` is a ModelOutputs or an (od, oc, p) triple; ``targets`` is
    an (od_mask, oc_mask, label) triple. Each term is averaged over the
    batch before weighting.
    """
    if hasattr(outputs, "od_soft"):
        od, oc, p = outputs.od_soft, outputs.oc_soft, outputs.p_glaucoma
    else:
        od, oc, p = outputs
    y_od, y_oc, y = targets
    if y_od is None or y_oc is None or y is None:
        raise MissingGroundTruth("total_loss needs both masks and the label")

    use_torch = any(_is_torch(v) for v in (od, oc, p))
    if use_torch:
        od, oc, p = (torch.as_tensor(v) for v in (od, oc, p))
        y_od = torch.as_tensor(y_od, dtype=od.dtype)
        y_oc = torch.as_tensor(y_oc, dtype=oc.dtype)
        y = torch.as_tensor(y, dtype=p.dtype)
    else:
        od, oc, p = np.asarray(od, float), np.asarray(oc, float), np.asarray(p, float)
        y_od, y_oc, y = np.asarray(y_od, float), np.asarray(y_oc, float), np.asarray(y, float)

    l_od = _per_sample_dice_loss(od, y_od).mean()
    l_cp = _per_sample_dice_loss(oc, y_oc).mean()
    l_cls = bce(p, y)
    l_cls = l_cls.mean() if hasattr(l_cls, "mean") else l_cls
    w = weights
    total = w.w_od * l_od + w.w_cp * l_cp + w.w_cls * l_cls
    return LossBreakdown(l_od, l_cp, l_cls, total)
