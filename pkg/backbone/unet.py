"""
Cross-attention U-Net over 16x16x4 latents
Records head-averaged cross-attention maps of every encoder level and the decoder stage outputs
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from backbone.vae import group_norm
from recovery.errors import ConfigurationError, DimensionError
from training.config import UNetConfig


@dataclass
class AttentionStack:
    """Per-layer cross-attention maps, each B x r_l x r_l x Z"""
    maps: Dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def layer_resolutions(self) -> List[int]:
        return [self.maps[layer].shape[1] for layer in sorted(self.maps)]

    def layer(self, layer: int) -> torch.Tensor:
        if layer not in self.maps:
            raise ConfigurationError(f"attention layer {layer} was not recorded (have {sorted(self.maps)})")
        return self.maps[layer]

    def columns(self, layer: int, columns: Sequence[int]) -> torch.Tensor:
        """Maps of the given token columns: B x len(columns) x r x r"""
        return rearrange(self.layer(layer)[..., list(columns)], 'b h w k -> b k h w')


@dataclass
class UNetOutputs:
    predicted_noise: torch.Tensor
    attention: AttentionStack
    decoder_features: Dict[str, torch.Tensor]


def head_averaged_attention(q: torch.Tensor, k: torch.Tensor, heads: int) -> torch.Tensor:
    """Softmax over tokens per head, then the mean over heads: B x N x Z"""
    q, k = [rearrange(x, 'b n (h d) -> b h n d', h=heads) for x in (q, k)]
    scores = torch.einsum('bhnd,bhzd->bhnz', q, k) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1).mean(dim=1)


class CrossAttention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v = nn.Linear(context_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        qh, kh, vh = [rearrange(t, 'b n (h d) -> b h n d', h=self.heads) for t in (q, k, v)]
        probs = (torch.einsum('bhnd,bhzd->bhnz', qh, kh) / math.sqrt(qh.shape[-1])).softmax(dim=-1)
        out = rearrange(torch.einsum('bhnz,bhzd->bhnd', probs, vh), 'b h n d -> b n (h d)')
        return self.to_out(out), probs.mean(dim=1)


class SpatialCrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.attn = CrossAttention(channels, context_dim, heads)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        tokens = rearrange(self.norm(x), 'b c h w -> b (h w) c')
        out, probs = self.attn(tokens, context)
        out = rearrange(out, 'b (h w) c -> b c h w', h=h, w=w)
        return x + out, rearrange(probs, 'b (h w) z -> b h w z', h=h, w=w)


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dims: int, max_period: float = 10000.0):
        super().__init__()
        half = dims // 2
        self.register_buffer('frequencies', torch.exp(-math.log(max_period) * torch.arange(half) / half))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t.to(self.frequencies.dtype)[:, None] * self.frequencies[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time = nn.Linear(time_dim, out_channels)
        self.norm2 = group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TinyUNet(nn.Module):
    """
    Encoder attention layers l = 1..L run at latent/1, /2, /4, ...
    Decoder stages up-1..up-L run from the coarsest resolution back to the latent size.
    """

    def __init__(self, config: UNetConfig, context_length: Optional[int] = None):
        super().__init__()
        self.config = config
        self.context_length = context_length
        widths = config.widths
        self.levels = len(widths)

        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(config.time_embed_dim),
            nn.Linear(config.time_embed_dim, config.time_embed_dim), nn.SiLU(),
            nn.Linear(config.time_embed_dim, config.time_embed_dim),
        )
        self.conv_in = nn.Conv2d(config.latent_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        previous = widths[0]
        for i, width in enumerate(widths):
            self.down_res.append(TimeResBlock(previous, width, config.time_embed_dim))
            self.down_attn.append(SpatialCrossAttention(width, config.context_dim, config.heads))
            if i < self.levels - 1:
                self.downsample.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            previous = width

        self.mid = TimeResBlock(widths[-1], widths[-1], config.time_embed_dim)

        # up-1 is the coarsest decoder stage
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        previous = widths[-1]
        for i in reversed(range(self.levels)):
            self.up_res.append(TimeResBlock(previous + widths[i], widths[i], config.time_embed_dim))
            self.up_attn.append(SpatialCrossAttention(widths[i], config.context_dim, config.heads))
            if i > 0:
                self.upsample.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
                previous = widths[i - 1]

        self.conv_out = nn.Sequential(group_norm(widths[0]), nn.SiLU(),
                                      nn.Conv2d(widths[0], config.latent_channels, 3, padding=1))

    def stage_channels(self) -> Dict[str, int]:
        return {f'up-{k + 1}': self.config.widths[self.levels - 1 - k] for k in range(self.levels)}

    def stage_resolutions(self) -> Dict[str, int]:
        return {f'up-{k + 1}': self.config.latent_size // 2 ** (self.levels - 1 - k) for k in range(self.levels)}

    def _check_inputs(self, noisy_latent: torch.Tensor, conditioning: torch.Tensor):
        size, channels = self.config.latent_size, self.config.latent_channels
        if noisy_latent.dim() != 4 or tuple(noisy_latent.shape[1:]) != (channels, size, size):
            raise DimensionError(f"expected B x {channels} x {size} x {size} latent, got {tuple(noisy_latent.shape)}")
        if conditioning.shape[-1] != self.config.context_dim:
            raise DimensionError(f"conditioning width {conditioning.shape[-1]} != {self.config.context_dim}")
        if self.context_length is not None and conditioning.shape[-2] != self.context_length:
            raise DimensionError(f"conditioning has {conditioning.shape[-2]} rows, expected {self.context_length}")
        if conditioning.dim() == 3 and conditioning.shape[0] not in (1, noisy_latent.shape[0]):
            raise DimensionError("conditioning batch does not match latent batch")

    def forward(self, noisy_latent: torch.Tensor, t, conditioning: torch.Tensor) -> UNetOutputs:
        self._check_inputs(noisy_latent, conditioning)
        batch = noisy_latent.shape[0]
        if conditioning.dim() == 2:
            conditioning = conditioning.unsqueeze(0)
        context = conditioning.expand(batch, -1, -1)
        t = torch.as_tensor(t, device=noisy_latent.device).reshape(-1).expand(batch)
        temb = self.time_embed(t)

        h = self.conv_in(noisy_latent)
        skips = []
        attention = AttentionStack()
        for i in range(self.levels):
            h = self.down_res[i](h, temb)
            h, probs = self.down_attn[i](h, context)
            attention.maps[i + 1] = probs
            skips.append(h)
            if i < self.levels - 1:
                h = self.downsample[i](h)

        h = self.mid(h, temb)

        decoder_features = {}
        for k in range(self.levels):
            h = torch.cat([h, skips.pop()], dim=1)
            h = self.up_res[k](h, temb)
            h, _ = self.up_attn[k](h, context)
            decoder_features[f'up-{k + 1}'] = h
            if k < self.levels - 1:
                h = self.upsample[k](F.interpolate(h, scale_factor=2, mode='nearest'))

        return UNetOutputs(self.conv_out(h), attention, decoder_features)
