"""
Focal loss and the four-term mask supervision
"""
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from recovery.errors import DimensionError, ValidationError
from training.losses import downsample_mask

RMP_TERMS = ('coarse_df', 'refined_df', 'coarse_ob', 'refined_ob')


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: Optional[float] = 0.75) -> torch.Tensor:
    """
    Mean per-pixel focal loss on B x 2 x H x W logits against a B x H x W {0,1} target.
    alpha weighs the anomalous class (1 - alpha the normal class); None disables weighting.
    """
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise DimensionError(f"expected B x 2 x H x W logits, got {tuple(logits.shape)}")
    if target.shape != (logits.shape[0], *logits.shape[2:]):
        raise DimensionError(f"target {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    target = target.long()
    log_probs = F.log_softmax(logits, dim=1)
    log_pt = log_probs.gather(1, target[:, None]).squeeze(1)
    pt = log_pt.exp()
    loss = -((1 - pt) ** gamma) * log_pt
    if alpha is not None:
        weight = torch.where(target == 1, torch.full_like(pt, alpha), torch.full_like(pt, 1 - alpha))
        loss = weight * loss
    return loss.mean()


@dataclass
class RMPLoss:
    coarse_df: torch.Tensor
    refined_df: torch.Tensor
    coarse_ob: torch.Tensor
    refined_ob: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.coarse_df + self.refined_df + self.coarse_ob + self.refined_ob

    def as_floats(self) -> Dict[str, float]:
        values = {name: float(getattr(self, name).detach()) for name in RMP_TERMS}
        values['total'] = float(self.total.detach())
        return values

    def log_line(self, step: int) -> str:
        values = self.as_floats()
        return f"step={step} " + ' '.join(f"{k}={values[k]:.6f}" for k in (*RMP_TERMS, 'total'))


def rmp_loss(pred_coarse_df: Optional[torch.Tensor], pred_refined_df: Optional[torch.Tensor],
             pred_coarse_ob: Optional[torch.Tensor], pred_refined_ob: Optional[torch.Tensor],
             gt_mask: Optional[torch.Tensor], gamma: float = 2.0, alpha: Optional[float] = 0.75,
             normal_supervision: bool = True, coarse_supervision: bool = True) -> RMPLoss:
    """
    Focal terms at coarse and image resolution for abnormal predictions (against the
    ground-truth mask) and normal predictions (against all-zero masks).
    """
    reference = next(p for p in (pred_refined_df, pred_refined_ob, pred_coarse_df, pred_coarse_ob) if p is not None)
    zero = torch.zeros((), dtype=reference.dtype, device=reference.device)
    coarse_df = refined_df = coarse_ob = refined_ob = zero

    if pred_refined_df is not None:
        if gt_mask is None:
            raise ValidationError("abnormal predictions need a ground-truth mask")
        gt = gt_mask.to(reference.dtype)
        refined_df = focal_loss(pred_refined_df, gt, gamma, alpha)
        if coarse_supervision and pred_coarse_df is not None:
            resolution = pred_coarse_df.shape[-1]
            coarse_gt = downsample_mask(gt, {0: resolution}).layer(0)
            coarse_df = focal_loss(pred_coarse_df, coarse_gt, gamma, alpha)

    if normal_supervision and pred_refined_ob is not None:
        batch, _, h, w = pred_refined_ob.shape
        refined_ob = focal_loss(pred_refined_ob, torch.zeros(batch, h, w, device=reference.device), gamma, alpha)
        if coarse_supervision and pred_coarse_ob is not None:
            batch, _, h, w = pred_coarse_ob.shape
            coarse_ob = focal_loss(pred_coarse_ob, torch.zeros(batch, h, w, device=reference.device), gamma, alpha)

    return RMPLoss(coarse_df, refined_df, coarse_ob, refined_ob)
