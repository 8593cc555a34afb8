"""
Tiny VAE - 64x64x3 images to 16x16x4 latents
Exposes the decoder up-block outputs (and matching encoder features) for mask refinement
"""
import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from recovery.errors import DimensionError, NumericError, RangeError
from training.config import VAEConfig


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.block = nn.Sequential(
            group_norm(in_channels), nn.SiLU(), nn.Conv2d(in_channels, out_channels, 3, padding=1),
            group_norm(out_channels), nn.SiLU(), nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.block(x)


class TinyVAE(nn.Module):
    """
    Encoder: image (w0) -> /2 (w1) -> /4 (w2) -> latent mean/logvar
    Decoder: latent -> up-block 1 at /4 (w2) -> up-block 2 at /2 (w1) -> up-block 3 at full res (w0)
    Images are B x 3 x H x W in [0, 1]; latents are scaled by latent_scale.
    """

    def __init__(self, config: VAEConfig):
        super().__init__()
        self.config = config
        w0, w1, w2 = config.widths
        zc = config.latent_channels

        self.enc_in = nn.Conv2d(3, w0, 3, padding=1)
        self.enc_block3 = ResBlock(w0, w0)
        self.enc_down2 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc_block2 = ResBlock(w1, w1)
        self.enc_down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc_block1 = ResBlock(w2, w2)
        self.enc_out = nn.Sequential(group_norm(w2), nn.SiLU(), nn.Conv2d(w2, 2 * zc, 3, padding=1))

        self.dec_in = nn.Conv2d(zc, w2, 3, padding=1)
        self.dec_block1 = ResBlock(w2, w2)
        self.dec_up2 = nn.Conv2d(w2, w1, 3, padding=1)
        self.dec_block2 = ResBlock(w1, w1)
        self.dec_up3 = nn.Conv2d(w1, w0, 3, padding=1)
        self.dec_block3 = ResBlock(w0, w0)
        self.dec_out = nn.Sequential(group_norm(w0), nn.SiLU(), nn.Conv2d(w0, 3, 3, padding=1))

        self.register_buffer('latent_scale', torch.ones((), dtype=torch.float32))

    @property
    def latent_size(self) -> int:
        return self.config.image_size // 4

    def _check_image(self, image: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected B x 3 x H x W image, got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise NumericError("image contains non-finite values")
        if image.min() < -1e-6 or image.max() > 1 + 1e-6:
            raise RangeError("image values must lie in [0, 1]")

    def _encoder_stages(self, image: torch.Tensor):
        h3 = self.enc_block3(self.enc_in(image * 2 - 1))
        h2 = self.enc_block2(self.enc_down2(h3))
        h1 = self.enc_block1(self.enc_down1(h2))
        return h1, h2, h3

    def encode_distribution(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Unscaled posterior mean and log-variance"""
        self._check_image(image)
        h1, _, _ = self._encoder_stages(image)
        mean, logvar = self.enc_out(h1).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Scaled latent (posterior mean)"""
        mean, _ = self.encode_distribution(image)
        return mean * self.latent_scale

    def encoder_features(self, image: torch.Tensor) -> List[torch.Tensor]:
        """Encoder features ordered coarse to fine, matching the decoder up-blocks"""
        self._check_image(image)
        h1, h2, h3 = self._encoder_stages(image)
        return [h1, h2, h3]

    def decode_raw(self, latent: torch.Tensor, unscaled: bool = False):
        if not torch.isfinite(latent).all():
            raise NumericError("latent contains non-finite values")
        z = latent if unscaled else latent / self.latent_scale
        f1 = self.dec_block1(self.dec_in(z))
        f2 = self.dec_block2(self.dec_up2(F.interpolate(f1, scale_factor=2, mode='nearest')))
        f3 = self.dec_block3(self.dec_up3(F.interpolate(f2, scale_factor=2, mode='nearest')))
        return self.dec_out(f3), [f1, f2, f3]

    def decode(self, latent: torch.Tensor,
               capture_features: bool = False) -> Tuple[torch.Tensor, Optional[List[torch.Tensor]]]:
        """Decode a scaled latent into an image clamped to [0, 1]"""
        raw, features = self.decode_raw(latent)
        image = ((raw + 1) / 2).clamp(0.0, 1.0)
        return image, (features if capture_features else None)

    def forward(self, image: torch.Tensor, generator: Optional[torch.Generator] = None):
        """Reconstruction pass used by pre-training: (reconstruction in [-1, 1] space, mean, logvar)"""
        mean, logvar = self.encode_distribution(image)
        eps = torch.randn(mean.shape, generator=generator, device=mean.device, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        raw, _ = self.decode_raw(z, unscaled=True)
        return raw, mean, logvar
