"""
Refined mask prediction: coarse feature extraction from U-Net decoder stages,
cascaded mask refinement modules gated by VAE features, and the two mask heads
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from recovery.errors import ConfigurationError, DimensionError, RangeError
from training.config import RMPConfig

COARSE_STAGE = 'up-3'


@dataclass
class RefinedMask:
    """scores: B x 2 x H x W softmax over {normal, anomalous}"""
    scores: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> 'RefinedMask':
        return cls(logits.softmax(dim=1))

    @property
    def anomaly_scores(self) -> torch.Tensor:
        return self.scores[:, 1]

    def binary(self, threshold: float) -> torch.Tensor:
        if not 0.0 < threshold < 1.0:
            raise RangeError(f"mask threshold must lie in (0, 1), got {threshold}")
        return self.anomaly_scores > threshold


@dataclass
class RMPOutput:
    coarse_logits: torch.Tensor
    refined_logits: torch.Tensor

    @property
    def coarse_mask(self) -> torch.Tensor:
        return self.coarse_logits.softmax(dim=1)

    @property
    def refined(self) -> RefinedMask:
        return RefinedMask.from_logits(self.refined_logits)


class CoarseFeatureExtractor(nn.Module):
    """
    1x1 compression of each selected decoder stage, resampling onto the up-3 grid,
    concatenation and fusion through a transformer encoder
    """

    def __init__(self, config: RMPConfig, stage_channels: Dict[str, int], stage_resolutions: Dict[str, int]):
        super().__init__()
        self.stages = list(config.unet_features)
        missing = [s for s in self.stages if s not in stage_channels]
        if missing:
            raise ConfigurationError(f"U-Net has no decoder stages {missing}")
        self.resolution = stage_resolutions[COARSE_STAGE]
        self.compress = nn.ModuleDict({
            stage: nn.Conv2d(stage_channels[stage], width, 1)
            for stage, width in zip(self.stages, config.coarse_channels)
        })
        self.channels = sum(config.coarse_channels)
        if self.channels % config.transformer_heads:
            raise ConfigurationError(f"coarse width {self.channels} not divisible by {config.transformer_heads} heads")
        self.position = nn.Parameter(torch.zeros(1, self.resolution ** 2, self.channels))
        layer = nn.TransformerEncoderLayer(self.channels, config.transformer_heads, 2 * self.channels,
                                           dropout=0.0, activation='gelu', batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, config.transformer_layers, enable_nested_tensor=False)
        self.head = nn.Sequential(
            nn.Conv2d(self.channels, self.channels, 3, padding=1), nn.GELU(),
            nn.Conv2d(self.channels, 2, 1),
        )

    def forward(self, decoder_features: Dict[str, torch.Tensor]):
        streams = []
        for stage in self.stages:
            if stage not in decoder_features:
                raise ConfigurationError(f"decoder feature {stage} is missing")
            x = self.compress[stage](decoder_features[stage])
            if x.shape[-1] != self.resolution:
                x = F.interpolate(x, size=(self.resolution, self.resolution), mode='bilinear', align_corners=False)
            streams.append(x)
        x = torch.cat(streams, dim=1)
        tokens = rearrange(x, 'b c h w -> b (h w) c') + self.position
        tokens = self.transformer(tokens)
        feature = rearrange(tokens, 'b (h w) c -> b c h w', h=self.resolution)
        return feature, self.head(feature)


class ConvBlock(nn.Module):
    """1x1 -> 3x3 -> 1x1"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        mid = max(out_channels // 2, 4)
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, mid, 1), nn.GELU(),
            nn.Conv2d(mid, mid, 3, padding=1), nn.GELU(),
            nn.Conv2d(mid, out_channels, 1),
        )

    def forward(self, x):
        return self.block(x)


MRM_BLOCKS = {'a': 0, 'b': 1, 'c': 2}


class MaskRefinementModule(nn.Module):
    """
    Upsample the discriminative feature, run conv blocks beside a 1x1 conv, sum,
    gate by the VAE feature and fuse with a 3x3 conv.
    Variant a has no conv blocks, b has one, c chains two.
    """

    def __init__(self, in_channels: int, vae_channels: int, variant: str = 'c', scale: int = 2):
        super().__init__()
        if variant not in MRM_BLOCKS:
            raise ConfigurationError(f"unknown MRM variant {variant!r}")
        self.variant = variant
        self.scale = scale
        blocks = []
        for i in range(MRM_BLOCKS[variant]):
            blocks.append(ConvBlock(in_channels if i == 0 else vae_channels, vae_channels))
        self.blocks = nn.Sequential(*blocks)
        self.shortcut = nn.Conv2d(in_channels, vae_channels, 1)
        self.fuse = nn.Conv2d(vae_channels, vae_channels, 3, padding=1)

    def forward(self, feature: torch.Tensor, vae_feature: torch.Tensor) -> torch.Tensor:
        expected = tuple(self.scale * s for s in feature.shape[-2:])
        if tuple(vae_feature.shape[-2:]) != expected:
            raise DimensionError(f"VAE feature {tuple(vae_feature.shape[-2:])} must be {self.scale}x "
                                 f"the discriminative feature {tuple(feature.shape[-2:])}")
        x = F.interpolate(feature, scale_factor=self.scale, mode='nearest')
        path = self.shortcut(x)
        if len(self.blocks):
            path = path + self.blocks(x)
        return self.fuse(F.gelu(path * vae_feature))


class RefinedMaskPredictor(nn.Module):
    def __init__(self, config: RMPConfig, stage_channels: Dict[str, int], stage_resolutions: Dict[str, int],
                 vae_channels: Sequence[int], image_size: int):
        super().__init__()
        self.config = config
        self.image_size = image_size
        self.coarse = CoarseFeatureExtractor(config, stage_channels, stage_resolutions)
        vae_channels = list(vae_channels)
        if config.refinement == 'progressive':
            widths = [self.coarse.channels] + vae_channels
            self.mrms = nn.ModuleList([
                MaskRefinementModule(widths[i], widths[i + 1], config.mrm_variant) for i in range(3)
            ])
        elif config.refinement == 'single':
            scale = image_size // self.coarse.resolution
            self.mrms = nn.ModuleList([
                MaskRefinementModule(self.coarse.channels, vae_channels[-1], config.mrm_variant, scale)
            ])
        else:
            self.mrms = nn.ModuleList()
        self.head = nn.Conv2d(vae_channels[-1], 2, 3, padding=1) if len(self.mrms) else None

    def upsampled_coarse(self, coarse_logits: torch.Tensor) -> torch.Tensor:
        return F.interpolate(coarse_logits, size=(self.image_size, self.image_size), mode='bilinear',
                             align_corners=False)

    def forward_coarse(self, decoder_features: Dict[str, torch.Tensor]) -> RMPOutput:
        """Coarse branch only; the refined logits are the upsampled coarse logits"""
        _, coarse_logits = self.coarse(decoder_features)
        return RMPOutput(coarse_logits, self.upsampled_coarse(coarse_logits))

    def forward(self, decoder_features: Dict[str, torch.Tensor], vae_features: List[torch.Tensor]) -> RMPOutput:
        feature, coarse_logits = self.coarse(decoder_features)
        if not len(self.mrms):
            return RMPOutput(coarse_logits, self.upsampled_coarse(coarse_logits))
        if vae_features is None or len(vae_features) < 3:
            raise ConfigurationError("mask refinement needs three VAE features")
        if self.config.refinement == 'single':
            x = self.mrms[0](feature, vae_features[2])
        else:
            x = feature
            for mrm, vae_feature in zip(self.mrms, vae_features[:3]):
                x = mrm(x, vae_feature)
        return RMPOutput(coarse_logits, self.head(x))
