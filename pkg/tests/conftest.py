"""Shared fixtures: micro float64 models, tiny corpora, temporary run directories"""
import os

import numpy as np
import pytest
import torch

from backbone.generator import GeneratorModel
from backbone.unet import TinyUNet
from backbone.vae import TinyVAE
from rmp.trainer import build_rmp
from synthdata.corpus import make_corpus
from synthdata.products import ProductSpec
from training.config import config_from_dict

MICRO_CONFIG = {
    'data': {'image_size': 32, 'normal_count': 4, 'abnormal_per_type': 2},
    'vae': {'image_size': 32, 'widths': [4, 4, 8], 'steps': 4, 'batch_size': 4},
    'unet': {'latent_size': 8, 'widths': [8, 8, 8, 8], 'heads': 2, 'context_dim': 8, 'time_embed_dim': 16},
    'prompt': {'embedding_dim': 8},
    'train': {'max_steps': 2},
    'rmp': {'max_steps': 2, 'coarse_channels': [4, 4], 'transformer_layers': 1, 'transformer_heads': 2},
    'inference': {'count': 3, 'batch_size': 2, 'sampler_steps': 4, 'mask_average_steps': 3},
}


def micro_config_dict(**sections):
    data = {name: dict(values) for name, values in MICRO_CONFIG.items()}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return data


def pytest_collection_modifyitems(config, items):
    if os.getenv('SEAS_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set SEAS_RUN_SLOW=1 to run toy end-to-end checks")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def micro_config(tmp_path):
    data = micro_config_dict(paths={'cache_dir': str(tmp_path / 'cache'), 'data_dir': str(tmp_path / 'corpus'),
                                    'out_dir': str(tmp_path / 'runs')})
    return config_from_dict(data).validate()


@pytest.fixture
def micro_unet(micro_config):
    torch.manual_seed(0)
    return TinyUNet(micro_config.unet, context_length=micro_config.prompt.padded_length).double()


@pytest.fixture
def micro_vae(micro_config):
    torch.manual_seed(0)
    return TinyVAE(micro_config.vae).double().requires_grad_(False)


@pytest.fixture
def micro_model(micro_config, micro_vae):
    return GeneratorModel.create(micro_config, micro_vae).double()


@pytest.fixture
def micro_rmp(micro_model, micro_config):
    torch.manual_seed(0)
    return build_rmp(micro_model, micro_config.rmp).double()


@pytest.fixture(scope='session')
def tiny_corpus():
    config = config_from_dict(micro_config_dict()).validate()
    spec = ProductSpec.from_config(config.data)
    return make_corpus(spec, config.data.normal_count, config.data.abnormal_per_type, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def central_difference_max_relative_error(fn, x: torch.Tensor, h: float = 1e-5) -> float:
    """Largest relative error between autograd and central finite differences of a scalar fn"""
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        shifted = flat.clone()
        shifted[i] += h
        upper = fn(shifted.view_as(x)).item()
        shifted[i] -= 2 * h
        lower = fn(shifted.view_as(x)).item()
        numeric.view(-1)[i] = (upper - lower) / (2 * h)
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-6)
    return float(((analytic - numeric).abs() / scale).max())


@pytest.fixture
def max_relative_error():
    return central_difference_max_relative_error
