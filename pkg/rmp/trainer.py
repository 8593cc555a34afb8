"""
Mask-branch training on features of the frozen generator
"""
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from backbone.checkpoint import load_component, save_component
from backbone.generator import GeneratorModel
from backbone.schedule import forward_diffuse
from metrics.detection import ap, auroc, f1max, iou
from recovery.error_recovery import ErrorRecoverySystem
from recovery.errors import CompatibilityError, ConfigurationError, DivergenceError
from rmp.features import step_features
from rmp.losses import rmp_loss
from rmp.modules import RefinedMaskPredictor
from synthdata.corpus import Corpus
from training.base_trainer import BaseTrainer
from training.config import RMPConfig, RunConfig, config_from_dict
from training.generator_trainer import encode_images, sample_batch


def build_rmp(model: GeneratorModel, config: RMPConfig) -> RefinedMaskPredictor:
    w0, w1, w2 = model.vae.config.widths
    return RefinedMaskPredictor(config, model.unet.stage_channels(), model.unet.stage_resolutions(),
                                (w2, w1, w0), model.vae.config.image_size)


def check_frozen(model: GeneratorModel):
    trainable = model.trainable_generator_parameters()
    if trainable:
        raise ConfigurationError(f"generator must be frozen for mask training; trainable: {trainable[:3]}")


class RMPTrainer(BaseTrainer):
    """Trains only the mask branch on mixed abnormal/normal batches"""

    def __init__(self, model: GeneratorModel, rmp: RefinedMaskPredictor, corpus: Corpus, config: RunConfig,
                 run_dir: Path, error_system: Optional[ErrorRecoverySystem] = None):
        check_frozen(model)
        self.model = model
        self.rmp = rmp
        self.corpus = corpus
        self.rmp_config = config.rmp
        super().__init__(run_dir, config.rmp.total_steps(corpus.num_types), config.rmp.seed, error_system)
        self.batch_config = replace(config.train, abnormal_count=config.rmp.abnormal_count,
                                    normal_count=config.rmp.normal_count,
                                    mixed_strategy='abnormal_and_normal', no_mixed=False)
        self.rng = np.random.default_rng(config.rmp.seed)
        self.dtype = next(model.unet.parameters()).dtype
        self.abnormal_latents = encode_images(model.vae, [s.image for s in corpus.abnormal]).to(self.dtype)
        self.normal_latents = encode_images(model.vae, [s.image for s in corpus.normal]).to(self.dtype)
        self.abnormal_masks = torch.from_numpy(np.stack([s.mask for s in corpus.abnormal])).to(self.dtype)
        self.timesteps = torch.as_tensor(config.rmp.feature_timesteps, dtype=torch.long)
        self.optimizer = torch.optim.AdamW(rmp.parameters(), lr=config.rmp.lr, weight_decay=config.rmp.weight_decay)

    def _prompt_for(self, anomaly_type: int):
        return self.model.normal_prompt() if anomaly_type == 0 else self.model.prompt(anomaly_type)

    def _features(self, latents: torch.Tensor, prompts):
        t = self.timesteps[torch.randint(0, len(self.timesteps), (latents.shape[0],), generator=self.generator)]
        noise = torch.randn(latents.shape, generator=self.generator, dtype=latents.dtype)
        noisy = forward_diffuse(latents, t, noise, self.model.schedule)
        return step_features(self.model, noisy, t, self.model.conditioning(prompts),
                             self.rmp_config.vae_feature_source)

    def train_step(self, step: int) -> Dict[str, float]:
        batch = sample_batch(self.corpus, self.batch_config, self.rng, self._prompt_for, step, self.total_steps)
        coarse_df = refined_df = coarse_ob = refined_ob = gt = None
        if batch.abnormal_indices:
            features = self._features(self.abnormal_latents[batch.abnormal_indices], batch.abnormal_prompts)
            output = self.rmp(features.decoder_features, features.vae_features)
            coarse_df, refined_df = output.coarse_logits, output.refined_logits
            gt = self.abnormal_masks[batch.abnormal_indices]
        if batch.normal_indices and self.rmp_config.normal_supervision:
            features = self._features(self.normal_latents[batch.normal_indices], batch.normal_prompts)
            output = self.rmp.forward_coarse(features.decoder_features)
            coarse_ob, refined_ob = output.coarse_logits, output.refined_logits
        loss = rmp_loss(coarse_df, refined_df, coarse_ob, refined_ob, gt,
                        self.rmp_config.focal_gamma, self.rmp_config.focal_alpha,
                        self.rmp_config.normal_supervision, self.rmp_config.coarse_supervision)
        values = loss.as_floats()
        for name, value in values.items():
            if not np.isfinite(value):
                raise DivergenceError(step, name, value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        self.optimizer.step()
        self.log_step(loss.log_line(step))
        return values


def save_rmp(rmp: RefinedMaskPredictor, directory: Path, config: RunConfig, generator_fp: str) -> Dict:
    return save_component(directory, 'rmp', rmp.state_dict(), config.to_dict(),
                          {'generator_fingerprint': generator_fp})


def load_rmp(directory: Path, model: GeneratorModel) -> RefinedMaskPredictor:
    """Load rmp.pt and check it was trained on this generator"""
    archive = load_component(directory, 'rmp')
    expected = model.fingerprints()['generator']
    if archive.get('generator_fingerprint') != expected:
        raise CompatibilityError(f"rmp checkpoint belongs to generator {archive.get('generator_fingerprint')}, "
                                 f"loaded generator is {expected}")
    rmp = build_rmp(model, config_from_dict(archive['config']).rmp)
    rmp.load_state_dict(archive['state_dict'])
    rmp.requires_grad_(False)
    rmp.eval()
    return rmp


def train_rmp(corpus: Corpus, generator_dir: Path, config: RunConfig, checkpoint_dir: Path,
              error_system: Optional[ErrorRecoverySystem] = None) -> Dict:
    """Train the mask branch against a frozen generator checkpoint and save rmp.pt"""
    model = GeneratorModel.load(generator_dir, config)
    before = model.fingerprints()
    torch.manual_seed(config.rmp.seed)
    rmp = build_rmp(model, config.rmp)
    trainer = RMPTrainer(model, rmp, corpus, config, checkpoint_dir, error_system)
    history = trainer.run()
    if model.fingerprints() != before:
        raise ConfigurationError("generator weights changed during mask training")
    archive = save_rmp(rmp, checkpoint_dir, config, before['generator'])
    return {'rmp': rmp, 'model': model, 'history': history, 'fingerprint': archive['fingerprint'],
            'generator_fingerprint': before['generator']}


@torch.no_grad()
def evaluate_rmp_on_corpus(model: GeneratorModel, rmp: RefinedMaskPredictor, corpus: Corpus,
                           config: RunConfig, seed: int = 0) -> Dict[str, float]:
    """Pixel AUROC / AP / F1-max and IoU of predicted masks on the real abnormal images"""
    generator = torch.Generator().manual_seed(seed)
    latents = encode_images(model.vae, [s.image for s in corpus.abnormal]).to(next(model.unet.parameters()).dtype)
    prompts = [model.prompt(s.anomaly_type) for s in corpus.abnormal]
    conditioning = model.conditioning(prompts)
    noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
    scores = 0.0
    for t in config.rmp.feature_timesteps:
        noisy = forward_diffuse(latents, int(t), noise, model.schedule)
        features = step_features(model, noisy, int(t), conditioning, config.rmp.vae_feature_source)
        scores = scores + rmp(features.decoder_features, features.vae_features).refined.anomaly_scores
    scores = (scores / len(config.rmp.feature_timesteps)).cpu().numpy()
    masks = np.stack([s.mask for s in corpus.abnormal])
    binary = scores > config.inference.mask_threshold
    return {
        'pixel_auroc': auroc(scores, masks),
        'pixel_ap': ap(scores, masks),
        'pixel_f1max': f1max(scores, masks),
        'iou': float(np.mean([iou(binary[i], masks[i]) for i in range(len(masks))])),
    }
