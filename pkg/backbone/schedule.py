"""
Noise schedule, forward diffusion and the deterministic sampler step
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import torch

from recovery.errors import DimensionError, OrderingError, RangeError

logger = logging.getLogger(__name__)

# t_to value that denotes the clean endpoint (alpha = 1, beta = 0)
CLEAN_STEP = -1

Timestep = Union[int, torch.Tensor]


@dataclass
class NoiseSchedule:
    """
    Variance-preserving schedule: alpha_t^2 + beta_t^2 = 1.
    clip_sample bounds every predicted clean latent (None leaves it unbounded).
    """
    num_train_steps: int
    alpha: torch.Tensor
    beta: torch.Tensor
    clip_sample: Optional[float] = None

    def __post_init__(self):
        self.alpha = torch.as_tensor(self.alpha, dtype=torch.float64)
        self.beta = torch.as_tensor(self.beta, dtype=torch.float64)
        if self.alpha.shape != (self.num_train_steps,) or self.beta.shape != (self.num_train_steps,):
            raise DimensionError(f"schedule arrays must have length {self.num_train_steps}")
        if not torch.allclose(self.alpha ** 2 + self.beta ** 2, torch.ones_like(self.alpha), atol=1e-6):
            raise RangeError("schedule is not variance preserving (alpha^2 + beta^2 != 1)")

    @classmethod
    def cosine(cls, num_train_steps: int = 1000, offset: float = 0.008,
               clip_sample: Optional[float] = None) -> 'NoiseSchedule':
        """Cosine signal decay; betas clipped so alpha never reaches 0"""
        steps = torch.arange(num_train_steps + 1, dtype=torch.float64)
        f = torch.cos(((steps / num_train_steps) + offset) / (1 + offset) * math.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = torch.clamp(1 - alpha_bar[1:] / alpha_bar[:-1], max=0.999)
        alpha_bar = torch.cumprod(1 - betas, dim=0)
        return cls(num_train_steps, torch.sqrt(alpha_bar), torch.sqrt(1 - alpha_bar), clip_sample)

    def check_timestep(self, t: Timestep, allow_clean: bool = False):
        low = CLEAN_STEP if allow_clean else 0
        t_min, t_max = (int(t.min()), int(t.max())) if torch.is_tensor(t) else (int(t), int(t))
        if t_min < low or t_max >= self.num_train_steps:
            raise RangeError(f"timestep out of range [{low}, {self.num_train_steps}): {t_min}..{t_max}")

    def coefficients(self, t: Timestep, allow_clean: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
        """(alpha_t, beta_t) as float64 tensors; t = -1 maps to (1, 0) when allowed"""
        self.check_timestep(t, allow_clean)
        t = torch.as_tensor(t, dtype=torch.long)
        clean = t == CLEAN_STEP
        index = torch.where(clean, torch.zeros_like(t), t)
        alpha = torch.where(clean, torch.ones((), dtype=torch.float64), self.alpha[index])
        beta = torch.where(clean, torch.zeros((), dtype=torch.float64), self.beta[index])
        return alpha, beta


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(device=like.device, dtype=like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.view(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(latent: torch.Tensor, t: Timestep, noise: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """alpha_t * latent + beta_t * noise; t is an int or one step per batch element"""
    if noise.shape != latent.shape:
        raise DimensionError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(latent.shape)}")
    alpha, beta = schedule.coefficients(t)
    return _broadcast(alpha, latent) * latent + _broadcast(beta, latent) * noise


def predict_clean(noisy_latent: torch.Tensor, t: Timestep, predicted_noise: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Clean latent implied by a noise prediction at step t, clamped when the schedule clips"""
    alpha, beta = schedule.coefficients(t, allow_clean=True)
    clean = (noisy_latent - _broadcast(beta, noisy_latent) * predicted_noise) / _broadcast(alpha, noisy_latent)
    if schedule.clip_sample is not None:
        clean = clean.clamp(-schedule.clip_sample, schedule.clip_sample)
    return clean


def sample_step(noisy_latent: torch.Tensor, t_from: int, t_to: int, predicted_noise: torch.Tensor,
                schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update (eta = 0) from t_from down to t_to"""
    if t_to >= t_from:
        raise OrderingError(f"sampler step must descend: t_to={t_to} >= t_from={t_from}")
    if predicted_noise.shape != noisy_latent.shape:
        raise DimensionError("predicted noise and latent shapes differ")
    schedule.check_timestep(t_from)
    alpha_to, beta_to = schedule.coefficients(t_to, allow_clean=True)
    clean = predict_clean(noisy_latent, t_from, predicted_noise, schedule)
    if schedule.clip_sample is not None:
        # noise consistent with the clamped clean latent
        alpha_from, beta_from = schedule.coefficients(t_from)
        residual = noisy_latent - _broadcast(alpha_from, noisy_latent) * clean
        predicted_noise = residual / _broadcast(beta_from, noisy_latent)
    return _broadcast(alpha_to, noisy_latent) * clean + _broadcast(beta_to, noisy_latent) * predicted_noise


def start_timestep(noise_strength: float, schedule: NoiseSchedule) -> int:
    """Schedule position for a noise strength rho in (0, 1]"""
    if not 0.0 < noise_strength <= 1.0:
        raise RangeError(f"noise strength must lie in (0, 1], got {noise_strength}")
    return int(round(noise_strength * (schedule.num_train_steps - 1)))


def sampling_timesteps(t_start: int, num_steps: int) -> List[int]:
    """num_steps timesteps evenly spaced from t_start down to 0"""
    if num_steps < 1:
        raise RangeError("sampler needs at least one step")
    if num_steps == 1:
        return [t_start]
    steps = torch.linspace(t_start, 0, num_steps, dtype=torch.float64).round().long().tolist()
    if len(set(steps)) != len(steps):
        raise RangeError(f"{num_steps} sampler steps do not fit below t_start={t_start}")
    return steps


def fit_sampler_steps(t_start: int, num_steps: int) -> int:
    """Largest step count not above num_steps that gives distinct timesteps below t_start"""
    fitted = max(1, min(num_steps, t_start + 1))
    if fitted < num_steps:
        logger.warning(f"{num_steps} sampler steps do not fit below t_start={t_start}; using {fitted}")
    return fitted


def sampling_pairs(t_start: int, num_steps: int) -> List[Tuple[int, int]]:
    """(t_from, t_to) pairs of a trajectory; the last pair lands on the clean endpoint"""
    steps = sampling_timesteps(t_start, num_steps)
    return list(zip(steps, steps[1:] + [CLEAN_STEP]))
