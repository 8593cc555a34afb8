"""
Fixed-weight convolutional feature stack standing in for the Inception / perceptual
networks: pooled features for KID, class probabilities for IS, and an LPIPS-style
distance (unit-normalised channel differences averaged over space, summed over layers).
"""
import hashlib
from typing import List, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from recovery.errors import DimensionError

ImageBatch = Union[np.ndarray, torch.Tensor, Sequence[np.ndarray]]

LAYER_WIDTHS = (16, 32, 64)


class FeatureExtractor(nn.Module):
    """Deterministic per (seed, num_classes); the fingerprint identifies the weights in reports"""

    def __init__(self, seed: int = 0, num_classes: int = 10, logit_scale: float = 4.0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.num_classes = num_classes
        self.logit_scale = logit_scale
        self.convs = nn.ModuleList()
        in_ch = 3
        for width in LAYER_WIDTHS:
            conv = nn.Conv2d(in_ch, width, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) / np.sqrt(in_ch * 9))
                conv.bias.zero_()
            self.convs.append(conv)
            in_ch = width
        self.classifier = nn.Linear(sum(LAYER_WIDTHS), num_classes)
        with torch.no_grad():
            self.classifier.weight.copy_(torch.randn(self.classifier.weight.shape, generator=generator))
            self.classifier.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()[:24]

    @staticmethod
    def _as_tensor(images: ImageBatch) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            batch = images.to(torch.float32)
        else:
            batch = torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i in images]))
            batch = batch.permute(0, 3, 1, 2)
        if batch.dim() != 4 or batch.shape[1] != 3:
            raise DimensionError(f"expected a batch of RGB images, got shape {tuple(batch.shape)}")
        return batch * 2.0 - 1.0

    def layer_activations(self, images: ImageBatch) -> List[torch.Tensor]:
        h = self._as_tensor(images)
        activations = []
        for conv in self.convs:
            h = F.relu(conv(h))
            activations.append(h)
        return activations

    @torch.no_grad()
    def features(self, images: ImageBatch) -> np.ndarray:
        """N x 112 pooled activations of every layer"""
        pooled = [a.mean(dim=(2, 3)) for a in self.layer_activations(images)]
        return torch.cat(pooled, dim=1).double().numpy()

    @torch.no_grad()
    def class_probs(self, images: ImageBatch) -> np.ndarray:
        feats = torch.from_numpy(self.features(images)).float()
        feats = (feats - feats.mean(dim=1, keepdim=True)) / (feats.std(dim=1, keepdim=True) + 1e-6)
        logits = self.logit_scale * self.classifier(feats) / np.sqrt(feats.shape[1])
        return torch.softmax(logits.double(), dim=1).numpy()

    @torch.no_grad()
    def distance(self, image_a: np.ndarray, image_b: np.ndarray) -> float:
        if np.shape(image_a) != np.shape(image_b):
            raise DimensionError(f"distance needs equal shapes, got {np.shape(image_a)} and {np.shape(image_b)}")
        total = 0.0
        for act in self.layer_activations([image_a, image_b]):
            normed = act / (act.norm(dim=1, keepdim=True) + 1e-10)
            total += float(((normed[0] - normed[1]) ** 2).sum(dim=0).mean())
        return total
