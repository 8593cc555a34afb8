"""
Generator fine-tuning: learnable prompt tokens + U-Net on mixed abnormal/normal batches
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from backbone.generator import GeneratorModel
from backbone.schedule import forward_diffuse
from backbone.vae import TinyVAE
from prompts.ua_prompt import UAPrompt
from recovery.error_recovery import ErrorRecoverySystem
from recovery.errors import ConfigurationError, DataError
from synthdata.corpus import Corpus
from training.base_trainer import BaseTrainer
from training.config import RunConfig, TrainConfig
from training.losses import (LossBreakdown, LossWeights, abnormal_loss, at_variant_loss, downsample_mask,
                             draw_diffusion, mean_anomaly_attention, normal_loss)

ALIGNMENT_SEED = 12345


@dataclass
class Batch:
    abnormal_indices: List[int]
    normal_indices: List[int]
    abnormal_prompts: List[UAPrompt]
    normal_prompts: List[UAPrompt]

    @property
    def size(self) -> int:
        return len(self.abnormal_indices) + len(self.normal_indices)


def batch_composition(config: TrainConfig, step: int, total_steps: int):
    """(abnormal count, normal count) for a step under the configured mixing strategy"""
    size = config.abnormal_count + config.normal_count
    if config.mixed_strategy == 'abnormal_and_normal':
        return config.abnormal_count, config.normal_count
    first_half = step < math.ceil(total_steps / 2)
    abnormal_first = config.mixed_strategy == 'abnormal_normal'
    return (size, 0) if first_half == abnormal_first else (0, size)


def _choose(rng: np.random.Generator, pool: Sequence[int], count: int) -> List[int]:
    if count == 0:
        return []
    replace = count > len(pool)
    return [int(i) for i in rng.choice(pool, size=count, replace=replace)]


def sample_batch(corpus: Corpus, config: TrainConfig, rng: np.random.Generator,
                 prompt_for: Callable[[int], UAPrompt], step: int = 0, total_steps: int = 1) -> Batch:
    """
    Draw one batch: abnormal samples paired with their type's prompt, normal samples with 'a <ob>'.
    Indices point into corpus.abnormal and corpus.normal.
    """
    n_abnormal, n_normal = batch_composition(config, step, total_steps)
    pool = list(range(len(corpus.abnormal)))
    if n_abnormal and not pool:
        raise DataError("no abnormal samples available for this batch")
    if n_normal and not corpus.normal:
        raise DataError("no normal samples available for this batch")
    abnormal = _choose(rng, pool, n_abnormal)
    normal = _choose(rng, list(range(len(corpus.normal))), n_normal)
    return Batch(
        abnormal_indices=abnormal,
        normal_indices=normal,
        abnormal_prompts=[prompt_for(corpus.abnormal[i].anomaly_type) for i in abnormal],
        normal_prompts=[prompt_for(0) for _ in normal],
    )


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 arrays to a B x 3 x H x W tensor"""
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).to(dtype).contiguous()


@torch.no_grad()
def encode_images(vae: TinyVAE, images: Sequence[np.ndarray], batch_size: int = 32) -> torch.Tensor:
    dtype = next(vae.parameters()).dtype
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(vae.encode(images_to_tensor(images[start:start + batch_size], dtype)))
    return torch.cat(chunks)


def _iou(pred: torch.Tensor, target: torch.Tensor) -> float:
    union = (pred | target).sum().item()
    if union == 0:
        return 1.0
    return (pred & target).sum().item() / union


@torch.no_grad()
def alignment_iou(model: GeneratorModel, latents: torch.Tensor, masks: torch.Tensor, types: Sequence[int],
                  layers: Sequence[int], timestep: int, threshold: float = 0.5) -> float:
    """
    IoU between the thresholded mean anomaly attention and M^l, averaged over samples and layers.
    Each map is divided by its maximum before thresholding.
    """
    generator = torch.Generator().manual_seed(ALIGNMENT_SEED)
    noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
    noisy = forward_diffuse(latents, timestep, noise, model.schedule)
    prompts = [model.prompt(n) for n in types]
    outputs = model.predict(noisy, timestep, model.conditioning(prompts))
    resolutions = {layer: outputs.attention.layer(layer).shape[1] for layer in layers}
    layer_masks = downsample_mask(masks.to(latents.dtype), resolutions)
    scores = []
    for layer in layers:
        attention = mean_anomaly_attention(outputs.attention, prompts[0], layer)
        peak = attention.flatten(1).max(dim=1).values.clamp_min(1e-12)
        predicted = (attention / peak[:, None, None]) >= threshold
        target = layer_masks.layer(layer) > 0.5
        scores.extend(_iou(predicted[i], target[i]) for i in range(latents.shape[0]))
    return float(np.mean(scores))


class GeneratorTrainer(BaseTrainer):
    """Separation and sharing fine-tuning of the U-Net and the prompt tokens"""

    def __init__(self, model: GeneratorModel, corpus: Corpus, config: RunConfig, run_dir: Path,
                 error_system: Optional[ErrorRecoverySystem] = None):
        self.model = model
        self.corpus = corpus
        self.config = config
        self.train_config = config.train
        total = config.train.total_steps(corpus.num_types)
        super().__init__(run_dir, total, config.train.seed, error_system)
        if corpus.num_types != model.num_types:
            raise ConfigurationError(f"corpus has {corpus.num_types} anomaly types, model expects {model.num_types}")
        if config.train.no_mixed and corpus.num_types > 1:
            raise ConfigurationError("train.no_mixed trains one generator per anomaly type; pass a single-type corpus")
        self.rng = np.random.default_rng(config.train.seed)
        self.weights = LossWeights(config.train.da_weight, config.train.df_weight,
                                   config.train.ob_weight, config.train.at_weight)
        self.layers = list(config.train.alignment_layers)
        self.alignment: Dict[str, float] = {}

        model.vae.requires_grad_(False)
        model.vae.eval()
        self.dtype = next(model.unet.parameters()).dtype
        self.abnormal_latents = encode_images(model.vae, [s.image for s in corpus.abnormal]).to(self.dtype)
        self.normal_latents = encode_images(model.vae, [s.image for s in corpus.normal]).to(self.dtype)
        self.abnormal_masks = torch.from_numpy(np.stack([s.mask for s in corpus.abnormal])).to(self.dtype)
        self.optimizer = self._build_optimizer()

    def _build_optimizer(self) -> torch.optim.Optimizer:
        groups = [{'params': list(self.model.unet.parameters()), 'lr': self.train_config.lr_unet}]
        if self.model.tokens.added.requires_grad and self.model.tokens.added.numel():
            groups.append({'params': [self.model.tokens.added], 'lr': self.train_config.lr_embeddings,
                           'weight_decay': 0.0})
        return torch.optim.AdamW(groups, weight_decay=self.train_config.weight_decay)

    def _prompt_for(self, anomaly_type: int) -> UAPrompt:
        return self.model.normal_prompt() if anomaly_type == 0 else self.model.prompt(anomaly_type)

    def measure_alignment(self) -> float:
        types = [s.anomaly_type for s in self.corpus.abnormal]
        self.model.unet.eval()
        value = alignment_iou(self.model, self.abnormal_latents, self.abnormal_masks, types,
                              self.layers, self.train_config.alignment_timestep)
        self.model.unet.train()
        return value

    def on_start(self):
        self.model.unet.train()
        self.alignment['start'] = self.measure_alignment()
        self.log_activity(f"alignment_iou={self.alignment['start']:.4f} (start)")

    def on_finish(self):
        self.alignment['end'] = self.measure_alignment()
        self.log_activity(f"alignment_iou={self.alignment['end']:.4f} (end)")
        self.logger.info(f"Alignment IoU {self.alignment['start']:.3f} -> {self.alignment['end']:.3f}")

    def compute_losses(self, batch: Batch) -> LossBreakdown:
        cfg = self.train_config
        unet, schedule = self.model.unet, self.model.schedule
        terms = LossBreakdown.zeros(self.dtype, self.weights)
        normal_latents = self.normal_latents[batch.normal_indices] if batch.normal_indices else None
        normal_cond = self.model.conditioning(batch.normal_prompts) if batch.normal_indices else None
        use_normal = normal_latents is not None and not cfg.no_na
        attention = None

        if batch.abnormal_indices:
            latents = self.abnormal_latents[batch.abnormal_indices]
            masks = self.abnormal_masks[batch.abnormal_indices]
            prompt = batch.abnormal_prompts[0]
            if any(p.df_columns != prompt.df_columns for p in batch.abnormal_prompts):
                raise ConfigurationError("abnormal prompts in one batch must share their column layout")
            conditioning = self.model.conditioning(batch.abnormal_prompts)
            draw = draw_diffusion(latents, schedule, self.generator)
            ab = abnormal_loss(unet, schedule, latents, masks, conditioning, prompt, draw, self.layers)
            terms.diffusion_df = ab.diffusion_df
            if cfg.da_weight != 0:
                terms.da_term1 = ab.da_term1
                if not cfg.no_st:
                    terms.da_term2 = ab.da_term2
            attention = ab.attention

        if cfg.at_variant:
            if attention is not None:
                draw = draw_diffusion(normal_latents, schedule, self.generator) if use_normal else None
                terms.at_term, diffusion_ob = at_variant_loss(
                    attention, batch.abnormal_prompts[0], self.abnormal_masks[batch.abnormal_indices], unet,
                    schedule, normal_latents if use_normal else None, normal_cond, draw, self.layers)
                if use_normal:
                    terms.diffusion_ob = diffusion_ob
            elif use_normal:
                draw = draw_diffusion(normal_latents, schedule, self.generator)
                terms.diffusion_ob = normal_loss(unet, schedule, normal_latents, normal_cond, draw)
        elif use_normal:
            draw = draw_diffusion(normal_latents, schedule, self.generator)
            terms.diffusion_ob = normal_loss(unet, schedule, normal_latents, normal_cond, draw)
        return terms

    def train_step(self, step: int) -> Dict[str, float]:
        batch = sample_batch(self.corpus, self.train_config, self.rng, self._prompt_for, step, self.total_steps)
        terms = self.compute_losses(batch)
        terms.check_finite(step)
        self.optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        params = [p for group in self.optimizer.param_groups for p in group['params']]
        torch.nn.utils.clip_grad_norm_(params, self.train_config.grad_clip)
        self.optimizer.step()
        self.log_step(terms.log_line(step))
        every = self.train_config.checkpoint_every
        if every and (step + 1) % every == 0 and step + 1 < self.total_steps:
            self.model.save(self.run_dir / f'step_{step + 1}')
        return terms.as_floats()


def train_generator(corpus: Corpus, config: RunConfig, vae: TinyVAE, checkpoint_dir: Path,
                    error_system: Optional[ErrorRecoverySystem] = None) -> Dict:
    """Fine-tune a fresh generator on a corpus and save unet.pt and tokens.pt next to vae.pt"""
    model = GeneratorModel.create(config, vae)
    vae_before = {k: v.clone() for k, v in vae.state_dict().items()}
    base_before = model.tokens.base_embeddings.clone()
    trainer = GeneratorTrainer(model, corpus, config, checkpoint_dir, error_system)
    history = trainer.run()
    for name, value in vae.state_dict().items():
        if not torch.equal(value, vae_before[name]):
            raise ConfigurationError(f"VAE parameter {name} changed during generator training")
    if not torch.equal(model.tokens.base_embeddings, base_before):
        raise ConfigurationError("base vocabulary rows changed during generator training")
    fingerprints = model.save(checkpoint_dir)
    return {'fingerprints': fingerprints, 'alignment': trainer.alignment, 'history': history,
            'total_steps': trainer.total_steps, 'model': model}
