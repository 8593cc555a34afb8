"""
Generator bundle: frozen VAE, conditioned U-Net, token table and schedule
"""
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn

from backbone.checkpoint import fingerprint_state, generator_fingerprint, load_component, save_component
from backbone.schedule import NoiseSchedule
from backbone.unet import TinyUNet, UNetOutputs
from backbone.vae import TinyVAE
from prompts.ua_prompt import TokenTable, UAPrompt, build_normal_prompt, build_prompt, embed
from recovery.errors import CompatibilityError
from training.config import RunConfig, config_from_dict


class GeneratorModel(nn.Module):
    def __init__(self, config: RunConfig, vae: TinyVAE, unet: TinyUNet, tokens: TokenTable):
        super().__init__()
        self.config = config
        self.vae = vae
        self.unet = unet
        self.tokens = tokens
        self.schedule = NoiseSchedule.cosine(config.schedule.num_train_steps, config.schedule.cosine_offset,
                                             config.schedule.clip_sample)
        self.families = list(config.data.defect_families)

    @property
    def num_types(self) -> int:
        return len(self.families)

    @classmethod
    def create(cls, config: RunConfig, vae: TinyVAE) -> 'GeneratorModel':
        torch.manual_seed(config.unet.seed)
        unet = TinyUNet(config.unet, context_length=config.prompt.padded_length)
        tokens = TokenTable.create(config.prompt, len(config.data.defect_families))
        return cls(config, vae, unet, tokens)

    def prompt(self, anomaly_type: int) -> UAPrompt:
        return build_prompt(self.tokens, anomaly_type, self.config.prompt, self.num_types, self.families)

    def normal_prompt(self) -> UAPrompt:
        return build_normal_prompt(self.tokens, self.config.prompt)

    def conditioning(self, prompts: Sequence[UAPrompt]) -> torch.Tensor:
        """B x Z x C conditioning for a list of prompts"""
        return torch.stack([embed(self.tokens, p) for p in prompts])

    def predict(self, noisy_latent: torch.Tensor, t, conditioning: torch.Tensor) -> UNetOutputs:
        return self.unet(noisy_latent, t, conditioning)

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        return self

    def trainable_generator_parameters(self) -> List[str]:
        return [name for name, p in self.named_parameters() if p.requires_grad]

    def fingerprints(self) -> Dict[str, str]:
        vae_fp = fingerprint_state(self.vae.state_dict())
        unet_fp = fingerprint_state(self.unet.state_dict())
        tokens_fp = fingerprint_state(self.tokens.state_dict())
        return {'vae': vae_fp, 'unet': unet_fp, 'tokens': tokens_fp,
                'generator': generator_fingerprint(vae_fp, unet_fp, tokens_fp)}

    def save(self, directory: Path) -> Dict[str, str]:
        """Write unet.pt and tokens.pt (the VAE is saved by pre-training)"""
        fingerprints = self.fingerprints()
        config = self.config.to_dict()
        save_component(directory, 'unet', self.unet.state_dict(), config,
                       {'vae_fingerprint': fingerprints['vae']})
        save_component(directory, 'tokens', self.tokens.state_dict(), config,
                       {**self.tokens.archive_extra(), 'vae_fingerprint': fingerprints['vae']})
        return fingerprints

    @classmethod
    def load(cls, directory: Path, config: Optional[RunConfig] = None) -> 'GeneratorModel':
        """Load vae.pt, unet.pt and tokens.pt and check they belong together"""
        vae = load_vae(directory)
        vae_fp = fingerprint_state(vae.state_dict())
        unet_archive = load_component(directory, 'unet')
        tokens_archive = load_component(directory, 'tokens')
        for archive in (unet_archive, tokens_archive):
            if archive.get('vae_fingerprint') != vae_fp:
                raise CompatibilityError(f"{archive['component']} checkpoint was trained on a different VAE")
        stored = config_from_dict(unet_archive['config'])
        # prompt layout, families and network shape follow the checkpoint; the caller's config is left alone
        base = config or stored
        config = replace(base, prompt=stored.prompt, unet=stored.unet, schedule=stored.schedule,
                         data=replace(base.data, defect_families=stored.data.defect_families))
        unet = TinyUNet(stored.unet, context_length=stored.prompt.padded_length)
        unet.load_state_dict(unet_archive['state_dict'])
        tokens = TokenTable.from_archive(tokens_archive)
        return cls(config, vae, unet, tokens).freeze()


def load_vae(directory: Path) -> TinyVAE:
    archive = load_component(directory, 'vae')
    vae = TinyVAE(config_from_dict(archive['config']).vae)
    vae.load_state_dict(archive['state_dict'])
    vae.requires_grad_(False)
    vae.eval()
    return vae
