"""Component checkpoints and generator/mask-branch compatibility"""
from dataclasses import replace

import pytest
import torch

from backbone.checkpoint import CHECKPOINT_VERSION, fingerprint_state, load_component, save_component
from backbone.generator import GeneratorModel, load_vae
from backbone.vae import TinyVAE
from recovery.errors import CompatibilityError, ConfigurationError
from rmp.trainer import build_rmp, load_rmp, save_rmp


@pytest.fixture
def checkpoint_dir(tmp_path):
    return tmp_path / 'checkpoints'


@pytest.fixture
def saved_model(micro_config, checkpoint_dir):
    torch.manual_seed(0)
    vae = TinyVAE(micro_config.vae).requires_grad_(False)
    save_component(checkpoint_dir, 'vae', vae.state_dict(), micro_config.to_dict())
    model = GeneratorModel.create(micro_config, vae)
    model.save(checkpoint_dir)
    return model


class TestComponentArchive:
    def test_round_trip(self, checkpoint_dir):
        state = {'w': torch.arange(6.0).view(2, 3)}
        archive = save_component(checkpoint_dir, 'unet', state, {'unet': {}})
        loaded = load_component(checkpoint_dir, 'unet')
        assert loaded['version'] == CHECKPOINT_VERSION
        assert loaded['fingerprint'] == archive['fingerprint']
        assert torch.equal(loaded['state_dict']['w'], state['w'])

    def test_fingerprint_covers_dtype_and_values(self):
        state = {'w': torch.zeros(3)}
        assert fingerprint_state(state) == fingerprint_state({'w': torch.zeros(3)})
        assert fingerprint_state(state) != fingerprint_state({'w': torch.zeros(3, dtype=torch.float64)})
        assert fingerprint_state(state) != fingerprint_state({'w': torch.tensor([0.0, 0.0, 1e-9])})

    def test_tampered_weights(self, checkpoint_dir):
        save_component(checkpoint_dir, 'tokens', {'w': torch.zeros(2)}, {})
        path = checkpoint_dir / 'tokens.pt'
        archive = torch.load(path, weights_only=False)
        archive['state_dict']['w'] += 1
        torch.save(archive, path)
        with pytest.raises(CompatibilityError):
            load_component(checkpoint_dir, 'tokens')

    def test_version_mismatch(self, checkpoint_dir):
        save_component(checkpoint_dir, 'rmp', {'w': torch.zeros(2)}, {})
        path = checkpoint_dir / 'rmp.pt'
        archive = torch.load(path, weights_only=False)
        archive['version'] = 'other'
        torch.save(archive, path)
        with pytest.raises(CompatibilityError):
            load_component(checkpoint_dir, 'rmp')

    def test_missing_and_unknown(self, checkpoint_dir):
        with pytest.raises(ConfigurationError, match='missing upstream checkpoint'):
            load_component(checkpoint_dir, 'vae')
        with pytest.raises(ConfigurationError):
            save_component(checkpoint_dir, 'optimizer', {}, {})


class TestGeneratorCheckpoints:
    def test_save_load_keeps_fingerprints(self, saved_model, checkpoint_dir, micro_config):
        loaded = GeneratorModel.load(checkpoint_dir, micro_config)
        assert loaded.fingerprints() == saved_model.fingerprints()
        assert loaded.trainable_generator_parameters() == []
        assert loaded.prompt(2).token_ids == saved_model.prompt(2).token_ids

    def test_load_leaves_caller_config_alone(self, saved_model, checkpoint_dir, micro_config):
        caller = replace(micro_config, data=replace(micro_config.data, defect_families=('hole',)),
                         schedule=replace(micro_config.schedule, clip_sample=None))
        loaded = GeneratorModel.load(checkpoint_dir, caller)
        assert caller.data.defect_families == ('hole',)
        assert caller.schedule.clip_sample is None
        assert loaded.families == list(micro_config.data.defect_families)
        assert loaded.schedule.clip_sample == micro_config.schedule.clip_sample
        assert loaded.config is not caller

    def test_vae_reloads(self, saved_model, checkpoint_dir):
        assert fingerprint_state(load_vae(checkpoint_dir).state_dict()) == saved_model.fingerprints()['vae']

    def test_unet_from_another_vae(self, saved_model, checkpoint_dir, micro_config):
        torch.manual_seed(1)
        other = TinyVAE(micro_config.vae)
        save_component(checkpoint_dir, 'vae', other.state_dict(), micro_config.to_dict())
        with pytest.raises(CompatibilityError):
            GeneratorModel.load(checkpoint_dir, micro_config)

    def test_rmp_bound_to_its_generator(self, saved_model, checkpoint_dir, micro_config):
        rmp = build_rmp(saved_model, micro_config.rmp)
        save_rmp(rmp, checkpoint_dir, micro_config, saved_model.fingerprints()['generator'])
        loaded = load_rmp(checkpoint_dir, GeneratorModel.load(checkpoint_dir, micro_config))
        assert fingerprint_state(loaded.state_dict()) == fingerprint_state(rmp.state_dict())

        save_rmp(rmp, checkpoint_dir, micro_config, 'someone-else')
        with pytest.raises(CompatibilityError):
            load_rmp(checkpoint_dir, GeneratorModel.load(checkpoint_dir, micro_config))
