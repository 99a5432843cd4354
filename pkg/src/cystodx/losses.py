"""Training objectives: focal, BCE, soft Dice, the compound segmentation loss,
and masked multi-label BCE for the marker heads."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    compound_weights: tuple[float, float] = (0.5, 0.5)  # (dice, bce)
    reduction: str = "mean"
    classification_mode: str = "focal"  # focal | bce | focal+bce

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in (0, 1]")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if min(self.compound_weights) < 0:
            raise ValueError("compound_weights must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.classification_mode not in ("focal", "bce", "focal+bce"):
            raise ValueError(f"unknown classification_mode {self.classification_mode!r}")


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def bce(p: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy on probabilities; supports soft targets in [0, 1]."""
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    p = p.clamp(EPS, 1.0 - EPS)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    return _reduce(loss, reduction)


def focal(
    p: torch.Tensor,
    y: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    reduction: str = "mean",
) -> torch.Tensor:
    """Focal loss on probabilities: -alpha_t * (1 - p_t)^gamma * log(p_t).

    For binary targets this is the textbook form; fractional targets (MixUp
    labels) weigh the positive and negative terms by y and 1 - y, which is the
    exact lambda-mixed combination of the two hard-label losses.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    p = p.clamp(EPS, 1.0 - EPS)
    pos = alpha * (1.0 - p) ** gamma * (-torch.log(p))
    neg = (1.0 - alpha) * p ** gamma * (-torch.log(1.0 - p))
    loss = y * pos + (1.0 - y) * neg
    return _reduce(loss, reduction)


def soft_dice_loss(p: torch.Tensor, m: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft Dice, computed per image then averaged over the batch."""
    if smooth <= 0:
        raise ValueError("smooth must be > 0")
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(m.shape)}")
    m = m.to(p.dtype)
    dims = tuple(range(1, p.ndim))
    inter = (p * m).sum(dim=dims)
    denom = p.sum(dim=dims) + m.sum(dim=dims)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return (1.0 - dice).mean()


def compound_seg_loss(p: torch.Tensor, m: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """w_dice * soft_dice + w_bce * bce; weights are normalized if they drift."""
    w_dice, w_bce = cfg.compound_weights
    total = w_dice + w_bce
    if abs(total - 1.0) > 1e-9:
        warnings.warn(f"compound weights sum to {total}; normalizing")
        w_dice, w_bce = w_dice / total, w_bce / total
    return w_dice * soft_dice_loss(p, m, cfg.dice_smooth) + w_bce * bce(
        p, m.to(p.dtype), cfg.reduction
    )


def masked_multilabel_bce(
    logits: torch.Tensor, targets: torch.Tensor, known: torch.Tensor
) -> torch.Tensor:
    """Sigmoid-BCE averaged over the known (non-unknown) marker entries only.

    Entries where `known` is False contribute neither loss nor gradient.
    """
    if logits.shape != targets.shape or logits.shape != known.shape:
        raise ValueError("logits, targets and known mask must share one shape")
    known = known.to(torch.bool)
    n_known = int(known.sum())
    if n_known == 0:
        raise ValueError("all labels in the batch are unknown")
    z = logits[known]
    y = targets[known].to(logits.dtype)
    # stable sigmoid-BCE: max(z, 0) - z*y + log(1 + exp(-|z|))
    loss = z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))
    return loss.mean()


def classification_loss(p: torch.Tensor, y: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Dispatch on cfg.classification_mode; focal-only is the default."""
    if cfg.classification_mode == "focal":
        return focal(p, y, cfg.focal_gamma, cfg.focal_alpha, cfg.reduction)
    if cfg.classification_mode == "bce":
        return bce(p, y, cfg.reduction)
    return focal(p, y, cfg.focal_gamma, cfg.focal_alpha, cfg.reduction) + bce(p, y, cfg.reduction)
