"""
Generator fine-tuning losses: decoupled anomaly alignment, normal-image alignment,
the abnormal total loss and the alternative alignment term
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from backbone.schedule import NoiseSchedule, forward_diffuse
from backbone.unet import AttentionStack, TinyUNet, UNetOutputs
from prompts.ua_prompt import UAPrompt
from recovery.errors import ConfigurationError, DimensionError, DivergenceError, ValidationError

logger = logging.getLogger(__name__)

LOSS_TERMS = ('da_term1', 'da_term2', 'at_term', 'diffusion_df', 'diffusion_ob')


@dataclass
class LayerMask:
    """Binary masks per alignment layer, each B x r_l x r_l"""
    masks: Dict[int, torch.Tensor] = field(default_factory=dict)

    def layer(self, layer: int) -> torch.Tensor:
        if layer not in self.masks:
            raise ConfigurationError(f"no mask for alignment layer {layer}")
        return self.masks[layer]


@dataclass
class DiffusionDraw:
    """Timesteps and noise for one diffusion loss evaluation"""
    t: torch.Tensor
    noise: torch.Tensor


def draw_diffusion(latents: torch.Tensor, schedule: NoiseSchedule,
                   generator: Optional[torch.Generator] = None) -> DiffusionDraw:
    """Uniform timesteps over the full schedule and Gaussian noise"""
    t = torch.randint(0, schedule.num_train_steps, (latents.shape[0],), generator=generator)
    noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
    return DiffusionDraw(t.to(latents.device), noise.to(latents.device))


def _as_batch(mask: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        return mask[None]
    if mask.dim() == 4 and mask.shape[1] == 1:
        return mask[:, 0]
    if mask.dim() != 3:
        raise DimensionError(f"expected H x W or B x H x W mask, got {tuple(mask.shape)}")
    return mask


def downsample_mask(full_mask: torch.Tensor, resolutions: Mapping[int, int]) -> LayerMask:
    """Max-pool a binary mask onto each layer's grid: a cell is 1 iff any covered pixel is 1"""
    mask = _as_batch(full_mask).to(torch.float64 if full_mask.dtype == torch.float64 else torch.float32)
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask must be binary (values 0 or 1)")
    pooled = {}
    for layer, resolution in resolutions.items():
        pooled[layer] = F.adaptive_max_pool2d(mask[:, None], resolution)[:, 0]
    return LayerMask(pooled)


def _frobenius_sq(x: torch.Tensor) -> torch.Tensor:
    """Per-sample squared Frobenius norm of B x r x r maps"""
    return x.pow(2).flatten(1).sum(dim=1)


def mean_anomaly_attention(attention: AttentionStack, prompt: UAPrompt, layer: int) -> torch.Tensor:
    return attention.columns(layer, prompt.df_columns).mean(dim=1)


def normal_attention(attention: AttentionStack, prompt: UAPrompt, layer: int) -> torch.Tensor:
    return attention.columns(layer, prompt.ob_columns).mean(dim=1)


def da_loss(attention: AttentionStack, prompt: UAPrompt, masks: LayerMask,
            layers: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    term1 = sum_l ||mean_n A_df^{n,l} - M^l||^2
    term2 = sum_l ||A_ob^l * M^l||^2
    Both per sample, averaged over the batch.
    """
    if not prompt.df_columns:
        raise ConfigurationError("alignment loss needs an abnormal prompt")
    term1, term2 = 0.0, 0.0
    for layer in layers:
        mask = masks.layer(layer)
        a_df = mean_anomaly_attention(attention, prompt, layer)
        a_ob = normal_attention(attention, prompt, layer)
        if a_df.shape != mask.shape:
            raise DimensionError(f"layer {layer}: attention {tuple(a_df.shape)} vs mask {tuple(mask.shape)}")
        term1 = term1 + _frobenius_sq(a_df - mask)
        term2 = term2 + _frobenius_sq(a_ob * mask)
    return term1.mean(), term2.mean()


def at_term(attention: AttentionStack, prompt: UAPrompt, masks: LayerMask,
            layers: Sequence[int]) -> torch.Tensor:
    """sum_l ||A_ob^l - (1 - M^l)||^2"""
    total = 0.0
    for layer in layers:
        mask = masks.layer(layer)
        total = total + _frobenius_sq(normal_attention(attention, prompt, layer) - (1 - mask))
    return total.mean()


def diffusion_loss(unet: TinyUNet, schedule: NoiseSchedule, latents: torch.Tensor,
                   conditioning: torch.Tensor, draw: DiffusionDraw) -> Tuple[torch.Tensor, UNetOutputs]:
    """Mean squared error between the drawn noise and the U-Net's prediction"""
    noisy = forward_diffuse(latents, draw.t, draw.noise, schedule)
    outputs = unet(noisy, draw.t, conditioning)
    return F.mse_loss(outputs.predicted_noise, draw.noise), outputs


@dataclass
class AbnormalTerms:
    da_term1: torch.Tensor
    da_term2: torch.Tensor
    diffusion_df: torch.Tensor
    attention: AttentionStack


def abnormal_loss(unet: TinyUNet, schedule: NoiseSchedule, latents: torch.Tensor, full_masks: Optional[torch.Tensor],
                  conditioning: torch.Tensor, prompt: UAPrompt, draw: DiffusionDraw,
                  layers: Sequence[int]) -> AbnormalTerms:
    """Alignment terms plus the abnormal diffusion term"""
    if full_masks is None:
        raise ValidationError("abnormal samples need a mask")
    batch_masks = _as_batch(full_masks)
    if torch.any(batch_masks.flatten(1).sum(dim=1) == 0):
        raise ValidationError("abnormal sample has an empty mask")
    diffusion_df, outputs = diffusion_loss(unet, schedule, latents, conditioning, draw)
    resolutions = {layer: outputs.attention.layer(layer).shape[1] for layer in layers}
    masks = downsample_mask(batch_masks.to(latents.dtype), resolutions)
    term1, term2 = da_loss(outputs.attention, prompt, masks, layers)
    return AbnormalTerms(term1, term2, diffusion_df, outputs.attention)


def normal_loss(unet: TinyUNet, schedule: NoiseSchedule, latents: torch.Tensor,
                normal_conditioning: torch.Tensor, draw: DiffusionDraw) -> torch.Tensor:
    """Diffusion loss on normal images conditioned on 'a <ob>' only"""
    loss, _ = diffusion_loss(unet, schedule, latents, normal_conditioning, draw)
    return loss


def at_variant_loss(attention: AttentionStack, prompt: UAPrompt, full_masks: torch.Tensor,
                    unet: TinyUNet, schedule: NoiseSchedule, normal_latents: Optional[torch.Tensor],
                    normal_conditioning: torch.Tensor, draw: Optional[DiffusionDraw],
                    layers: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    """(alignment term on A_ob, normal diffusion term); the alignment term replaces the second DA term"""
    resolutions = {layer: attention.layer(layer).shape[1] for layer in layers}
    masks = downsample_mask(_as_batch(full_masks).to(attention.layer(layers[0]).dtype), resolutions)
    alignment = at_term(attention, prompt, masks, layers)
    if normal_latents is None or normal_latents.shape[0] == 0:
        return alignment, torch.zeros((), dtype=alignment.dtype)
    return alignment, normal_loss(unet, schedule, normal_latents, normal_conditioning, draw)


@dataclass
class LossWeights:
    da: float = 1.0
    df: float = 1.0
    ob: float = 1.0
    at: float = 1.0


@dataclass
class LossBreakdown:
    da_term1: torch.Tensor
    da_term2: torch.Tensor
    at_term: torch.Tensor
    diffusion_df: torch.Tensor
    diffusion_ob: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def zeros(cls, dtype=torch.float32, weights: Optional[LossWeights] = None) -> 'LossBreakdown':
        zero = torch.zeros((), dtype=dtype)
        return cls(zero, zero, zero, zero, zero, weights or LossWeights())

    @property
    def total(self) -> torch.Tensor:
        w = self.weights
        return (w.da * (self.da_term1 + self.da_term2) + w.at * self.at_term
                + w.df * self.diffusion_df + w.ob * self.diffusion_ob)

    def as_floats(self) -> Dict[str, float]:
        values = {name: float(getattr(self, name).detach()) for name in LOSS_TERMS}
        values['total'] = float(self.total.detach())
        return values

    def check_finite(self, step: int):
        for name, value in self.as_floats().items():
            if not math.isfinite(value):
                raise DivergenceError(step, name, value)

    def log_line(self, step: int) -> str:
        values = self.as_floats()
        return f"step={step} " + ' '.join(f"{name}={values[name]:.6f}" for name in (*LOSS_TERMS, 'total'))
