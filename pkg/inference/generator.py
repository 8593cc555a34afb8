"""
Image-mask pair generation from a normal image: noise it, denoise under the
anomaly (or normal) prompt and average the refined masks of the last steps
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from backbone.generator import GeneratorModel
from backbone.schedule import (NoiseSchedule, fit_sampler_steps, forward_diffuse, predict_clean, sample_step,
                               sampling_pairs, start_timestep)
from backbone.vae import TinyVAE
from recovery.errors import ConfigurationError, DataError, RangeError
from rmp.features import vae_features_of
from rmp.modules import RefinedMaskPredictor
from rmp.trainer import load_rmp
from training.config import InferenceConfig
from training.generator_trainer import images_to_tensor

logger = logging.getLogger(__name__)

MODES = ('abnormal', 'normal')


@dataclass
class GenerationRequest:
    mode: str = 'abnormal'
    anomaly_type: Optional[int] = 1
    count: int = 100
    seed: int = 0
    noise_strength: float = 1.0
    sampler_steps: int = 25
    mask_threshold: float = 0.2
    mask_average_steps: int = 3
    batch_size: int = 16

    @classmethod
    def from_config(cls, config: InferenceConfig, mode: str = 'abnormal',
                    anomaly_type: Optional[int] = 1) -> 'GenerationRequest':
        return cls(mode, anomaly_type if mode == 'abnormal' else None, config.count, config.seed,
                   config.noise_strength, config.sampler_steps, config.mask_threshold,
                   config.mask_average_steps, config.batch_size)

    def validate(self, num_types: int) -> 'GenerationRequest':
        if self.mode not in MODES:
            raise ConfigurationError(f"generation mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == 'abnormal' and (self.anomaly_type is None or not 1 <= self.anomaly_type <= num_types):
            raise RangeError(f"abnormal generation needs an anomaly type in [1, {num_types}]")
        if not 0.0 < self.mask_threshold < 1.0:
            raise RangeError(f"mask threshold must lie in (0, 1), got {self.mask_threshold}")
        if not 0.0 < self.noise_strength <= 1.0:
            raise RangeError(f"noise strength must lie in (0, 1], got {self.noise_strength}")
        if self.mask_average_steps < 1 or self.sampler_steps < self.mask_average_steps:
            raise RangeError("sampler steps must be >= mask_average_steps >= 1")
        if self.count < 0 or self.batch_size < 1:
            raise RangeError("count must be >= 0 and batch_size >= 1")
        return self


@dataclass
class GeneratedSample:
    image: np.ndarray
    mask: Optional[np.ndarray]
    anomaly_type: int
    index: int
    seed: int
    normal_index: int
    mean_scores: Optional[np.ndarray] = None
    step_scores: List[np.ndarray] = field(default_factory=list)


def init_noisy_latent(vae: TinyVAE, normal_images: torch.Tensor, noise_strength: float,
                      schedule: NoiseSchedule, generator: torch.Generator,
                      dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, int]:
    """Encode normal images and forward-diffuse them to the step matching the noise strength"""
    t_start = start_timestep(noise_strength, schedule)
    with torch.no_grad():
        latents = vae.encode(normal_images.to(next(vae.parameters()).dtype)).to(dtype)
    noise = torch.randn(latents.shape, generator=generator, dtype=dtype)
    return forward_diffuse(latents, t_start, noise, schedule), t_start


def _to_numpy_image(images: torch.Tensor) -> np.ndarray:
    return images.permute(0, 2, 3, 1).cpu().to(torch.float32).numpy()


@torch.no_grad()
def generate(request: GenerationRequest, model: GeneratorModel, normal_pool: Sequence[np.ndarray],
             rmp: Optional[RefinedMaskPredictor] = None, record_scores: bool = False) -> List[GeneratedSample]:
    """
    Abnormal mode returns (image, mask) pairs whose masks threshold the mean anomaly score of
    the last mask_average_steps steps; normal mode returns images only.
    """
    request.validate(model.num_types)
    abnormal = request.mode == 'abnormal'
    if abnormal and rmp is None:
        raise ConfigurationError("abnormal generation needs a trained mask branch (rmp.pt)")
    if not len(normal_pool):
        raise DataError("generation needs at least one normal image")

    dtype = next(model.unet.parameters()).dtype
    generator = torch.Generator().manual_seed(request.seed)
    prompt = model.prompt(request.anomaly_type) if abnormal else model.normal_prompt()
    conditioning = model.conditioning([prompt])
    source = rmp.config.vae_feature_source if rmp is not None else 'decoder'
    results: List[GeneratedSample] = []

    for start in range(0, request.count, request.batch_size):
        size = min(request.batch_size, request.count - start)
        picks = torch.randint(0, len(normal_pool), (size,), generator=generator).tolist()
        normals = images_to_tensor([normal_pool[i] for i in picks])
        z, t_start = init_noisy_latent(model.vae, normals, request.noise_strength, model.schedule, generator, dtype)
        steps = fit_sampler_steps(t_start, request.sampler_steps)
        if abnormal and steps < request.mask_average_steps:
            raise RangeError(f"noise strength {request.noise_strength} leaves {steps} sampler step(s), fewer than "
                             f"mask_average_steps={request.mask_average_steps}")
        pairs = sampling_pairs(t_start, steps)
        first_mask_step = len(pairs) - request.mask_average_steps
        score_sum, history = None, []
        for i, (t_from, t_to) in enumerate(pairs):
            outputs = model.predict(z, t_from, conditioning)
            if abnormal and i >= first_mask_step:
                clean = predict_clean(z, t_from, outputs.predicted_noise, model.schedule)
                scores = rmp(outputs.decoder_features, vae_features_of(model, clean, source)).refined.anomaly_scores
                score_sum = scores if score_sum is None else score_sum + scores
                if record_scores:
                    history.append(scores.cpu().numpy())
            z = sample_step(z, t_from, t_to, outputs.predicted_noise, model.schedule)
        images, _ = model.vae.decode(z.to(next(model.vae.parameters()).dtype))
        images = _to_numpy_image(images)
        mean_scores = (score_sum / request.mask_average_steps).cpu().numpy() if abnormal else None
        for j in range(size):
            sample = GeneratedSample(
                image=images[j],
                mask=(mean_scores[j] > request.mask_threshold).astype(np.uint8) if abnormal else None,
                anomaly_type=request.anomaly_type if abnormal else 0,
                index=start + j,
                seed=request.seed,
                normal_index=picks[j],
                mean_scores=mean_scores[j] if abnormal else None,
                step_scores=[h[j] for h in history],
            )
            results.append(sample)
    logger.info(f"Generated {len(results)} {request.mode} samples (seed {request.seed})")
    return results


def load_checkpoints(directory: Path, with_rmp: bool = True):
    """Generator bundle plus (optionally) its mask branch from one checkpoint directory"""
    model = GeneratorModel.load(directory)
    rmp = load_rmp(directory, model) if with_rmp else None
    return model, rmp
