"""Segmentation, discriminator and generator losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 0.8
    lambda_adv: float = 0.2
    disc_scale: float = 0.5

    def __post_init__(self):
        if self.lambda_seg < 0 or self.lambda_adv < 0 or self.disc_scale < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


class GeneratorLoss(NamedTuple):
    total: torch.Tensor
    seg: torch.Tensor
    adv: torch.Tensor


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss for ``(N, V, *voxels)`` probability maps.

    Per sample: ``1 - (2/V) * sum_v <G,P> / (|G|^2 + |P|^2 + eps)``, then the
    batch mean. ``eps`` sits in the denominator only, so a class absent from
    both prediction and ground truth contributes zero overlap.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.dim() < 3:
        raise ValueError("dice_loss expects (N, V, *voxels)")
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary")
    gt = gt.to(pred.dtype)
    dims = tuple(range(2, pred.dim()))
    inter = (gt * pred).sum(dims)
    denom = (gt * gt).sum(dims) + (pred * pred).sum(dims) + eps
    per_sample = 1.0 - 2.0 * (inter / denom).mean(dim=1)
    return per_sample.mean()


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over the last axis (the M modality bits).

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logarithm.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log1p(-p)).mean(dim=-1)


def discriminator_loss(d_hat: torch.Tensor, t_real: torch.Tensor, disc_scale: float = 0.5) -> torch.Tensor:
    """``disc_scale * sum_z bce(d_hat_z, T_real_z)`` over a (Z, M) batch."""
    if d_hat.shape[0] != t_real.shape[0]:
        raise ValueError(f"batch length mismatch: {d_hat.shape[0]} predictions vs {t_real.shape[0]} codes")
    return disc_scale * bce(d_hat, t_real).sum()


def generator_loss(
    seg_pred: torch.Tensor,
    seg_gt: torch.Tensor,
    d_hat: Optional[torch.Tensor],
    weights: LossWeights = LossWeights(),
) -> GeneratorLoss:
    """``lambda_seg * dice + lambda_adv * sum_z bce(d_hat_z, 1)``.

    The adversarial target is the all-ones code: every representation should
    look like it came from a full-modality input. ``d_hat=None`` means no
    discriminator, so the adversarial addend is zero.
    """
    seg = dice_loss(seg_pred, seg_gt)
    if d_hat is None:
        adv = seg.new_zeros(())
    else:
        adv = bce(d_hat, torch.ones_like(d_hat)).sum()
    total = weights.lambda_seg * seg + weights.lambda_adv * adv
    return GeneratorLoss(total, seg, adv)
