"""Weighted Dice + cross-entropy training loss.

A single-channel logit map is treated as binary (sigmoid); otherwise the
channels are mutually exclusive classes (softmax) and class 0 is background.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

# alpha (Dice weight) per dataset
DATASET_ALPHA = {"synapse": 0.8, "btcv": 0.6, "acdc": 0.6, "isic": 0.6, "glas": 0.5, "monuseg": 0.5}


def _as_probs_and_onehot(logits, target):
    if logits.shape[1] == 1:
        y = target.reshape(logits.shape).to(logits.dtype)
        return torch.sigmoid(logits), y
    probs = torch.softmax(logits, dim=1)
    y = F.one_hot(target.long(), logits.shape[1]).permute(0, 3, 1, 2).to(logits.dtype)
    # foreground classes only
    return probs[:, 1:], y[:, 1:]


def soft_dice(probs, onehot, smooth: float = 1.0):
    """``1 - mean_c (2 sum p*y + s) / (sum p + sum y + s)`` with sums over batch and pixels."""
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + smooth) / (denom + smooth)).mean()


def dice_loss(logits, target, smooth: float = 1.0):
    """Soft Dice loss from logits ``(B, C, H, W)`` and integer labels ``(B, H, W)``."""
    probs, onehot = _as_probs_and_onehot(logits, target)
    return soft_dice(probs, onehot, smooth)


def bce_loss(logits, target):
    """Binary cross-entropy on logits, or multi-class cross-entropy; mean over pixels."""
    if logits.shape[1] == 1:
        return F.binary_cross_entropy_with_logits(logits, target.reshape(logits.shape).to(logits.dtype))
    return F.cross_entropy(logits, target.long())


def combined_loss(logits, target, alpha: float, smooth: float = 1.0):
    """``alpha * Dice + (1 - alpha) * CE``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * dice_loss(logits, target, smooth) + (1.0 - alpha) * bce_loss(logits, target)
