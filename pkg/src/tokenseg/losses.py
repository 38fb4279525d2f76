"""Training objectives for masks, geometry regression, and semantic alignment.

The segmentation objective treats foreground and background as two
independently supervised sigmoid maps. Each class gets a structural term
(boundary-weighted focal + boundary-weighted IoU) plus an unweighted dice
term; the boundary weight emphasizes pixels whose 31x31 neighborhood
disagrees with them:

    W = 1 + 5 * | avgpool_31(M) - M |        (stride 1, zero padding 15)

Every map argument accepts (H, W) or (B, H, W); reductions are per sample,
then averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

__all__ = [
    "LossWeights",
    "boundary_weight",
    "dice_loss",
    "geo_loss",
    "seg_loss",
    "sem_loss",
    "struct_loss",
    "total_loss",
]

from .geometry import GEO_BLOCKS

_CLAMP = 1e-7
_DEGENERATE_NORM = 1e-8


@dataclass
class LossWeights:
    lambda_seg: float = 1.0
    lambda_geo: float = 1.0
    lambda_sem: float = 1.0


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        return x.unsqueeze(0)
    if x.ndim == 3:
        return x
    raise ValueError(f"expected (H, W) or (B, H, W), got shape {tuple(x.shape)}")


def boundary_weight(mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel emphasis in [1, 6]; same shape as the input."""
    m = _as_batched(mask)
    pooled = nn.functional.avg_pool2d(
        m.unsqueeze(1), kernel_size=31, stride=1, padding=15
    ).squeeze(1)
    w = 1.0 + 5.0 * (pooled - m).abs()
    return w if mask.ndim == 3 else w.squeeze(0)


def struct_loss(
    prob: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor, gamma: float = 2.0
) -> torch.Tensor:
    """Boundary-weighted focal plus boundary-weighted IoU, batch mean.

    Probabilities are clamped for the logarithms only; the IoU term sees them
    raw so a perfect prediction scores exactly zero.
    """
    p = _as_batched(prob)
    m = _as_batched(mask)
    w = _as_batched(weight)
    pc = p.clamp(_CLAMP, 1.0 - _CLAMP)
    focal = -(
        m * (1.0 - pc).pow(gamma) * pc.log()
        + (1.0 - m) * pc.pow(gamma) * (1.0 - pc).log()
    )
    w_sum = w.sum(dim=(1, 2))
    focal_term = (w * focal).sum(dim=(1, 2)) / w_sum
    inter = (w * p * m).sum(dim=(1, 2))
    union = (w * (p + m)).sum(dim=(1, 2)) - inter
    iou_term = 1.0 - (inter + 1.0) / (union + 1.0)
    return (focal_term + iou_term).mean()


def dice_loss(prob: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Smoothed dice: zero when both maps are identical, including both empty."""
    p = _as_batched(prob)
    m = _as_batched(mask)
    inter = (p * m).sum(dim=(1, 2))
    total = p.sum(dim=(1, 2)) + m.sum(dim=(1, 2))
    return (1.0 - (2.0 * inter + 1.0) / (total + 1.0)).mean()


def seg_loss(p_fg: torch.Tensor, p_bg: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Sum of per-class structural + dice terms; each class weights its own mask."""
    m = _as_batched(mask).to(p_fg.dtype)
    loss = p_fg.new_zeros(())
    for prob, target in ((p_fg, m), (p_bg, 1.0 - m)):
        w = boundary_weight(target)
        loss = loss + struct_loss(prob, target, w) + dice_loss(prob, target)
    return loss


def geo_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the nine property blocks of each block's own MSE.

    A block averages over its own scalars first (so the 4-scalar bbox block
    counts once, like every single-scalar block), then blocks average.
    """
    if pred.ndim == 1:
        pred = pred.unsqueeze(0)
        target = target.unsqueeze(0)
    block_mses = [
        (pred[:, sl] - target[:, sl]).pow(2).mean(dim=1) for _, sl in GEO_BLOCKS
    ]
    return torch.stack(block_mses, dim=1).mean(dim=1).mean()


def sem_loss(
    proj: torch.Tensor,
    target: torch.Tensor,
    enabled: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean cosine distance between projected tokens and embedding rows.

    Rows where either vector's norm falls under 1e-8 contribute cosine 0
    (distance 1). ``enabled`` optionally masks out samples without semantic
    targets; if none remain the loss is 0.
    """
    if proj.ndim == 2:
        proj = proj.unsqueeze(0)
        target = target.unsqueeze(0)
    if proj.shape != target.shape:
        raise ValueError(f"projection {tuple(proj.shape)} vs target {tuple(target.shape)}")
    dot = (proj * target).sum(dim=-1)
    norms = proj.norm(dim=-1) * target.norm(dim=-1)
    degenerate = (proj.norm(dim=-1) < _DEGENERATE_NORM) | (
        target.norm(dim=-1) < _DEGENERATE_NORM
    )
    # keep the unselected branch finite so backward stays NaN-free
    safe_norms = torch.where(degenerate, torch.ones_like(norms), norms)
    cos = torch.where(degenerate, torch.zeros_like(dot), dot / safe_norms)
    per_sample = (1.0 - cos).mean(dim=1)
    if enabled is None:
        return per_sample.mean()
    enabled = enabled.to(torch.bool)
    if not bool(enabled.any()):
        return proj.new_zeros(())
    return per_sample[enabled].mean()


def total_loss(
    l_seg: torch.Tensor, l_geo: torch.Tensor, l_sem: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    return (
        weights.lambda_seg * l_seg
        + weights.lambda_geo * l_geo
        + weights.lambda_sem * l_sem
    )
