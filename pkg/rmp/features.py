"""
Features the mask branch consumes at one denoising step
"""
from dataclasses import dataclass
from typing import Dict, List

import torch

from backbone.generator import GeneratorModel
from backbone.schedule import predict_clean


@dataclass
class StepFeatures:
    decoder_features: Dict[str, torch.Tensor]
    vae_features: List[torch.Tensor]
    predicted_noise: torch.Tensor
    predicted_clean: torch.Tensor


def vae_features_of(model: GeneratorModel, predicted_clean: torch.Tensor, source: str = 'decoder') -> List[torch.Tensor]:
    """VAE decoder up-block outputs of the predicted clean latent, or encoder features of its decoded image"""
    image, decoder = model.vae.decode(predicted_clean, capture_features=True)
    if source == 'encoder':
        return model.vae.encoder_features(image)
    return decoder


@torch.no_grad()
def step_features(model: GeneratorModel, noisy_latent: torch.Tensor, t, conditioning: torch.Tensor,
                  source: str = 'decoder') -> StepFeatures:
    outputs = model.predict(noisy_latent, t, conditioning)
    clean = predict_clean(noisy_latent, torch.as_tensor(t), outputs.predicted_noise, model.schedule)
    return StepFeatures(outputs.decoder_features, vae_features_of(model, clean, source),
                        outputs.predicted_noise, clean)
