"""Training objectives: feature hallucination, masked heatmap regression and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import ConfigError


@dataclass(frozen=True)
class LossWeights:
    w_pi: float = 1.0
    w_pe: float = 1.0

    def __post_init__(self):
        if self.w_pi < 0 or self.w_pe < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


def hallucination_loss(f_depth: torch.Tensor, f_hall: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between depth-backbone and hallucinated features."""
    if f_depth.shape != f_hall.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_depth.shape)} vs {tuple(f_hall.shape)}")
    return ((f_depth - f_hall) ** 2).mean()


def pose_loss(pred_uv: torch.Tensor, pred_uz: torch.Tensor, gt_uv: torch.Tensor,
              gt_uz: torch.Tensor, mask_uv: torch.Tensor, mask_uz: torch.Tensor) -> torch.Tensor:
    """Masked heatmap MSE over both spaces.

    Stacks are ``B x J x H x W`` and masks ``B x J``. For each sample the
    per-channel mean squared errors of visible channels are summed and divided
    by the number of visible (joint, space) pairs; samples with nothing visible
    contribute zero. The result is averaged over the batch.
    """
    if pred_uv.shape != gt_uv.shape or pred_uz.shape != gt_uz.shape:
        raise ValueError(f"prediction/target shape mismatch: {tuple(pred_uv.shape)} vs "
                         f"{tuple(gt_uv.shape)}, {tuple(pred_uz.shape)} vs {tuple(gt_uz.shape)}")
    m_uv = mask_uv.to(pred_uv.dtype)
    m_uz = mask_uz.to(pred_uz.dtype)
    err_uv = torch.where(m_uv.bool(), ((pred_uv - gt_uv) ** 2).mean(dim=(-2, -1)),
                         torch.zeros((), dtype=pred_uv.dtype, device=pred_uv.device))
    err_uz = torch.where(m_uz.bool(), ((pred_uz - gt_uz) ** 2).mean(dim=(-2, -1)),
                         torch.zeros((), dtype=pred_uz.dtype, device=pred_uz.device))
    count = m_uv.sum(dim=-1) + m_uz.sum(dim=-1)
    per_sample = (err_uv.sum(dim=-1) + err_uz.sum(dim=-1)) / count.clamp(min=1)
    return per_sample.mean()


def total_loss(pi, pe, w: LossWeights = LossWeights()):
    return w.w_pi * pi + w.w_pe * pe
