"""
Segmentation losses on the foreground probability map and the total
training objective.

All losses flatten over every voxel of the batch. ``p`` is the foreground
channel of the two-class softmax, ``y`` the binary ground truth.
"""

from typing import Union

import torch

from model.models import LossWeights

EPS = 1e-6

Scalar = Union[torch.Tensor, float]


def _flat(p: torch.Tensor, y: torch.Tensor):
    y = y.to(dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")
    return p.reshape(-1), y.reshape(-1)


def dice_loss(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    p, y = _flat(p, y)
    intersection = (p * y).sum()
    return 1.0 - (2.0 * intersection + eps) / (p.sum() + y.sum() + eps)


def ce_loss(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    p, y = _flat(p, y)
    p = p.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def _p_t_and_alpha(p: torch.Tensor, y: torch.Tensor, alpha_balance: float, eps: float):
    p_t = torch.where(y > 0.5, p, 1.0 - p).clamp(eps, 1.0 - eps)
    alpha_t = torch.where(
        y > 0.5,
        torch.full_like(p, alpha_balance),
        torch.full_like(p, 1.0 - alpha_balance),
    )
    return p_t, alpha_t


def balanced_ce_loss(
    p: torch.Tensor, y: torch.Tensor, alpha_balance: float = 0.25, eps: float = EPS
) -> torch.Tensor:
    """Class-balanced cross-entropy, mean of -alpha_t log(p_t)."""
    p, y = _flat(p, y)
    p_t, alpha_t = _p_t_and_alpha(p, y, alpha_balance, eps)
    return -(alpha_t * torch.log(p_t)).mean()


def focal_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    alpha_balance: float = 0.25,
    gamma: float = 2.0,
    eps: float = EPS,
) -> torch.Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t); gamma = 0 is balanced CE."""
    p, y = _flat(p, y)
    p_t, alpha_t = _p_t_and_alpha(p, y, alpha_balance, eps)
    return -(alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def seg_loss(p: torch.Tensor, y: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """(1 - alpha_mix)(Dice + CE) + alpha_mix * Focal."""
    base = dice_loss(p, y) + ce_loss(p, y)
    focal = focal_loss(p, y, w.alpha_balance, w.gamma)
    return (1.0 - w.alpha_mix) * base + w.alpha_mix * focal


def total_loss(seg: Scalar, adv: Scalar, mmd2: Scalar, w: LossWeights) -> Scalar:
    """
    seg + alpha_adv * adv + beta_mmd * mmd2.

    Pass ``LossWeights.for_study(mode)`` to zero the inactive terms. MMD^2 is
    used raw, negative values included.
    """
    return seg + w.alpha_adv * adv + w.beta_mmd * mmd2
