"""Cross-entropy plus soft Dice, summed over both time points."""
from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def soft_dice_loss(logits, target, eps: float = DICE_EPS):
    """``1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)``; an empty target and prediction give 0."""
    p = torch.sigmoid(logits)
    inter = (p * target).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + target.sum() + eps)


def branch_loss(logits, target, eps: float = DICE_EPS):
    return F.binary_cross_entropy_with_logits(logits, target) + soft_dice_loss(logits, target, eps)


def joint_loss(y1, y2, logits1, logits2, eps: float = DICE_EPS):
    return branch_loss(logits1, y1, eps) + branch_loss(logits2, y2, eps)
