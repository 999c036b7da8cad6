"""Binary segmentation losses and pixel metrics for the road class.

Losses take logits as a Tensor and the target mask as a plain boolean
array; all are computed in numerically stable logit form. Metrics work
on binarized masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ConfigError, DimensionError, Tensor


@dataclass(frozen=True)
class LossConfig:
    variant: str = "focal_dice"       # focal_dice | bce_dice
    weight_pixel: float = 1.0
    weight_region: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.variant not in ("focal_dice", "bce_dice"):
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if self.weight_pixel < 0 or self.weight_region < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.focal_gamma < 0:
            raise ConfigError("focal gamma must be nonnegative")


def _target_tensor(logits, target):
    target = np.asarray(target)
    if target.shape != logits.shape and target.shape != logits.shape[:-1]:
        raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape}")
    t = target.reshape(logits.shape).astype(logits.dtype.type)
    return Tensor(t, dtype=logits.dtype)


def bce_loss(logits, target):
    """Mean binary cross-entropy in logit form: softplus(z) - z*t."""
    t = _target_tensor(logits, target)
    per_pixel = ops.sub(ops.softplus(logits), ops.mul(logits, t))
    return ops.tmean(per_pixel)


def focal_loss(logits, target, gamma=2.0, alpha=0.25):
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t).

    log p_t and 1 - p_t are both evaluated through softplus/sigmoid of
    the signed logit, avoiding saturation.
    """
    t = _target_tensor(logits, target)
    sign = Tensor(2.0 * t.data - 1.0, dtype=logits.dtype)     # +1 for road, -1 for background
    z_t = ops.mul(logits, sign)
    log_pt = ops.neg(ops.softplus(ops.neg(z_t)))              # log sigmoid(z_t)
    one_minus_pt = ops.sigmoid(ops.neg(z_t))
    alpha_t = Tensor(np.where(t.data > 0.5, alpha, 1.0 - alpha).astype(logits.dtype),
                     dtype=logits.dtype)
    per_pixel = ops.neg(ops.mul(ops.mul(alpha_t, ops.pow_const(one_minus_pt, gamma)), log_pt))
    return ops.tmean(per_pixel)


def dice_loss(logits, target, smooth=1.0):
    """Soft Dice over the whole image with sigmoid probabilities."""
    t = _target_tensor(logits, target)
    p = ops.sigmoid(logits)
    inter = ops.tsum(ops.mul(p, t))
    denom = ops.add(ops.tsum(p), ops.tsum(t))
    frac = ops.div(ops.add(ops.mul(inter, 2.0), smooth), ops.add(denom, smooth))
    return ops.sub(Tensor(np.asarray(1.0), dtype=logits.dtype), frac)


def combined_loss(logits, target, cfg):
    """weight_pixel * (focal or bce) + weight_region * dice."""
    if cfg.variant == "focal_dice":
        pixel = focal_loss(logits, target, cfg.focal_gamma, cfg.focal_alpha)
    else:
        pixel = bce_loss(logits, target)
    region = dice_loss(logits, target, cfg.dice_smooth)
    return ops.add(ops.mul(pixel, cfg.weight_pixel), ops.mul(region, cfg.weight_region))


def _counts(pred_mask, gt):
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred_mask.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred_mask.shape} vs {gt.shape}")
    tp = np.logical_and(pred_mask, gt).sum()
    fp = np.logical_and(pred_mask, ~gt).sum()
    fn = np.logical_and(~pred_mask, gt).sum()
    return float(tp), float(fp), float(fn)


def iou(pred_mask, gt):
    """Road-class intersection over union; 1.0 when both masks are empty."""
    tp, fp, fn = _counts(pred_mask, gt)
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def f1(pred_mask, gt):
    """Road-class F1; 1.0 when both masks are empty."""
    tp, fp, fn = _counts(pred_mask, gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def binarize(logits, threshold=0.5):
    """Sigmoid probability threshold on raw logits."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    prob = 0.5 * (1.0 + np.tanh(0.5 * data))
    return (prob > threshold).reshape(data.shape[:2])
