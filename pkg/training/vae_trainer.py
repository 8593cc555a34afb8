"""
VAE pre-training on the synthetic corpus
"""
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from backbone.checkpoint import save_component
from backbone.vae import TinyVAE
from recovery.error_recovery import ErrorRecoverySystem
from recovery.errors import DivergenceError
from synthdata.corpus import Corpus
from synthdata.products import ProductSpec, quantize, render_normal
from training.base_trainer import BaseTrainer
from training.config import RunConfig
from training.generator_trainer import images_to_tensor


class VAETrainer(BaseTrainer):
    """Reconstruction + small KL pre-training; measures the latent scale at the end"""

    def __init__(self, vae: TinyVAE, corpus: Corpus, config: RunConfig, run_dir: Path,
                 error_system: Optional[ErrorRecoverySystem] = None):
        self.vae = vae
        self.config = config
        super().__init__(run_dir, config.vae.steps, config.vae.seed, error_system)
        self.images = images_to_tensor([s.image for s in corpus.samples()])
        self.optimizer = torch.optim.AdamW(vae.parameters(), lr=config.vae.lr)
        self.reconstruction_mae: Optional[float] = None

    def train_step(self, step: int) -> Dict[str, float]:
        index = torch.randint(0, self.images.shape[0], (self.config.vae.batch_size,), generator=self.generator)
        images = self.images[index]
        raw, mean, logvar = self.vae(images, generator=self.generator)
        reconstruction = F.mse_loss(raw, images * 2 - 1)
        kl = -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())
        loss = reconstruction + self.config.vae.kl_weight * kl
        if not torch.isfinite(loss):
            raise DivergenceError(step, 'vae_total', float(loss))
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.log_step(f"step={step} reconstruction={reconstruction.item():.6f} kl={kl.item():.6f} "
                      f"total={loss.item():.6f}")
        return {'reconstruction': reconstruction.item(), 'kl': kl.item(), 'total': loss.item()}

    @torch.no_grad()
    def on_finish(self):
        self.vae.eval()
        means = torch.cat([self.vae.encode_distribution(self.images[i:i + 32])[0]
                           for i in range(0, self.images.shape[0], 32)])
        self.vae.latent_scale.fill_(1.0 / means.std().clamp_min(1e-6).item())
        decoded = torch.cat([self.vae.decode(self.vae.encode(self.images[i:i + 32]))[0]
                             for i in range(0, self.images.shape[0], 32)])
        self.reconstruction_mae = float((decoded - self.images).abs().mean())
        self.log_activity(f"latent_scale={self.vae.latent_scale.item():.5f} "
                          f"reconstruction_mae={self.reconstruction_mae:.4f}")


def reconstruction_mae(vae: TinyVAE, images) -> float:
    """Mean absolute round-trip error on H x W x 3 images"""
    with torch.no_grad():
        batch = images_to_tensor(list(images), next(vae.parameters()).dtype)
        decoded, _ = vae.decode(vae.encode(batch))
        return float((decoded - batch).abs().mean())


def heldout_normals(config: RunConfig) -> List[np.ndarray]:
    """Normal renders of the configured product drawn from seeds the corpus never uses"""
    spec = ProductSpec.from_config(config.data)
    children = np.random.SeedSequence([config.data.seed, config.vae.seed, 1]).spawn(config.vae.heldout_count)
    return [quantize(render_normal(spec, np.random.default_rng(child))) for child in children]


def pretrain_vae(corpus: Corpus, config: RunConfig, checkpoint_dir: Path,
                 error_system: Optional[ErrorRecoverySystem] = None) -> Dict:
    """Train a VAE from scratch, check it on held-out normals and save vae.pt"""
    torch.manual_seed(config.vae.seed)
    vae = TinyVAE(config.vae)
    trainer = VAETrainer(vae, corpus, config, checkpoint_dir, error_system)
    trainer.run()
    vae.requires_grad_(False)
    heldout_mae = reconstruction_mae(vae, heldout_normals(config)) if config.vae.heldout_count else None
    if heldout_mae is not None:
        trainer.log_activity(f"heldout_mae={heldout_mae:.4f} ({config.vae.heldout_count} fresh normals)")
    archive = save_component(checkpoint_dir, 'vae', vae.state_dict(), config.to_dict(),
                             {'reconstruction_mae': trainer.reconstruction_mae, 'heldout_mae': heldout_mae})
    return {'vae': vae, 'fingerprint': archive['fingerprint'],
            'reconstruction_mae': trainer.reconstruction_mae, 'heldout_mae': heldout_mae}
