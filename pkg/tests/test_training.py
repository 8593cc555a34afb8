"""Batch sampling, generator fine-tuning, VAE pre-training and mask-branch training"""
import math

import numpy as np
import pytest
import torch

from backbone.checkpoint import save_component
from backbone.generator import GeneratorModel
from backbone.vae import TinyVAE
from recovery.error_recovery import ErrorRecoverySystem
from recovery.errors import ConfigurationError, DataError, DivergenceError
from rmp.trainer import RMPTrainer, build_rmp, evaluate_rmp_on_corpus, train_rmp
from training.config import TrainConfig, config_from_dict
from training.generator_trainer import (GeneratorTrainer, alignment_iou, batch_composition, encode_images,
                                        sample_batch, train_generator)
from training.losses import LossBreakdown
from training.vae_trainer import heldout_normals, pretrain_vae, reconstruction_mae
from conftest import micro_config_dict


def prompt_stub(anomaly_type):
    return anomaly_type


@pytest.fixture
def fresh_vae(micro_config):
    torch.manual_seed(0)
    return TinyVAE(micro_config.vae).requires_grad_(False)


@pytest.fixture
def checkpoint_dir(micro_config, fresh_vae):
    directory = micro_config.paths.resolved_cache_dir() / 'checkpoints'
    save_component(directory, 'vae', fresh_vae.state_dict(), micro_config.to_dict())
    return directory


class TestBatchComposition:
    def test_default_steps(self):
        assert TrainConfig().total_steps(2) == 1600
        assert TrainConfig(max_steps=7).total_steps(2) == 7

    def test_mixed_every_step(self):
        config = TrainConfig()
        assert all(batch_composition(config, s, 10) == (2, 2) for s in range(10))

    @pytest.mark.parametrize('strategy, first, second', [
        ('abnormal_normal', (4, 0), (0, 4)),
        ('normal_abnormal', (0, 4), (4, 0)),
    ])
    def test_sequential_strategies(self, strategy, first, second):
        config = TrainConfig(mixed_strategy=strategy)
        assert batch_composition(config, 0, 10) == first
        assert batch_composition(config, 4, 10) == first
        assert batch_composition(config, 5, 10) == second


class TestSampleBatch:
    def test_deterministic_for_a_seed(self, tiny_corpus):
        config = TrainConfig()
        a = sample_batch(tiny_corpus, config, np.random.default_rng(3), prompt_stub)
        b = sample_batch(tiny_corpus, config, np.random.default_rng(3), prompt_stub)
        assert a.abnormal_indices == b.abnormal_indices
        assert a.normal_indices == b.normal_indices

    def test_prompts_follow_sample_types(self, tiny_corpus):
        batch = sample_batch(tiny_corpus, TrainConfig(), np.random.default_rng(0), prompt_stub)
        assert batch.size == 4
        assert batch.abnormal_prompts == [tiny_corpus.abnormal[i].anomaly_type for i in batch.abnormal_indices]
        assert batch.normal_prompts == [0, 0]

    def test_single_type_corpus_draws_only_that_type(self, tiny_corpus):
        corpus = tiny_corpus.single_type(2)
        assert corpus.num_types == 1
        assert [f.value for f in corpus.spec.defect_families] == [tiny_corpus.spec.defect_families[1].value]
        assert len(corpus.abnormal) == len(tiny_corpus.by_type(2))
        assert all(np.array_equal(a.mask, b.mask) for a, b in zip(corpus.abnormal, tiny_corpus.by_type(2)))
        batch = sample_batch(corpus, TrainConfig(abnormal_count=3), np.random.default_rng(0), prompt_stub)
        assert set(batch.abnormal_prompts) == {1}

    def test_empty_normal_partition(self, tiny_corpus):
        from synthdata.corpus import Corpus

        corpus = Corpus(tiny_corpus.spec, [], tiny_corpus.abnormal)
        with pytest.raises(DataError):
            sample_batch(corpus, TrainConfig(), np.random.default_rng(0), prompt_stub)


class TestGeneratorTraining:
    def test_two_step_run(self, tiny_corpus, micro_config, fresh_vae, checkpoint_dir):
        vae_before = {k: v.clone() for k, v in fresh_vae.state_dict().items()}
        result = train_generator(tiny_corpus, micro_config, fresh_vae, checkpoint_dir)
        assert result['total_steps'] == 2
        assert len(result['history']) == 2
        assert set(result['alignment']) == {'start', 'end'}
        for name, value in fresh_vae.state_dict().items():
            assert torch.equal(value, vae_before[name])
        assert (checkpoint_dir / 'unet.pt').exists() and (checkpoint_dir / 'tokens.pt').exists()
        lines = (checkpoint_dir / 'train_log.txt').read_text().splitlines()
        steps = [line for line in lines if line.startswith('step=')]
        assert len(steps) == 2
        assert 'da_term1=' in steps[0] and 'total=' in steps[0]

    def test_only_added_rows_and_unet_move(self, tiny_corpus, micro_config, fresh_vae, checkpoint_dir):
        model = GeneratorModel.create(micro_config, fresh_vae)
        base = model.tokens.base_embeddings.clone()
        added = model.tokens.added.detach().clone()
        trainer = GeneratorTrainer(model, tiny_corpus, micro_config, checkpoint_dir)
        trainer.run()
        assert torch.equal(model.tokens.base_embeddings, base)
        assert not torch.equal(model.tokens.added.detach(), added)

    def test_at_variant_records_alternative_term(self, tiny_corpus, tmp_path, fresh_vae):
        config = config_from_dict(micro_config_dict(train={'at_variant': True, 'no_st': True})).validate()
        model = GeneratorModel.create(config, fresh_vae)
        trainer = GeneratorTrainer(model, tiny_corpus, config, tmp_path / 'run')
        history = trainer.run()
        assert all(values['at_term'] > 0 for values in history)
        assert all(values['da_term2'] == 0 for values in history)

    def test_no_na_drops_normal_term(self, tiny_corpus, tmp_path, fresh_vae):
        config = config_from_dict(micro_config_dict(train={'no_na': True})).validate()
        trainer = GeneratorTrainer(GeneratorModel.create(config, fresh_vae), tiny_corpus, config, tmp_path / 'run')
        assert all(values['diffusion_ob'] == 0 for values in trainer.run())

    def test_divergence_is_recorded(self, tiny_corpus, micro_config, fresh_vae, tmp_path, monkeypatch):
        errors = ErrorRecoverySystem(tmp_path / 'errors')
        trainer = GeneratorTrainer(GeneratorModel.create(micro_config, fresh_vae), tiny_corpus, micro_config,
                                   tmp_path / 'run', errors)

        def nan_losses(batch):
            terms = LossBreakdown.zeros()
            terms.da_term1 = torch.tensor(float('nan'))
            return terms

        monkeypatch.setattr(trainer, 'compute_losses', nan_losses)
        with pytest.raises(DivergenceError) as info:
            trainer.run()
        assert info.value.term == 'da_term1'
        assert errors.load_records()[0]['category'] == 'divergence'

    def test_no_mixed_needs_a_single_type_corpus(self, tiny_corpus, tmp_path, fresh_vae):
        config = config_from_dict(micro_config_dict(train={'no_mixed': True})).validate()
        with pytest.raises(ConfigurationError, match='one generator per anomaly type'):
            GeneratorTrainer(GeneratorModel.create(config, fresh_vae), tiny_corpus, config, tmp_path / 'run')
        single = config.single_type(2)
        assert single.data.defect_families == (config.data.defect_families[1],)
        assert not single.train.no_mixed and config.train.no_mixed
        trainer = GeneratorTrainer(GeneratorModel.create(single, fresh_vae), tiny_corpus.single_type(2), single,
                                   tmp_path / 'single')
        assert len(trainer.run()) == 2

    def test_type_count_mismatch(self, tiny_corpus, tmp_path, fresh_vae):
        config = config_from_dict(micro_config_dict(data={'defect_families': ['scratch', 'blob', 'hole']}))
        with pytest.raises(ConfigurationError):
            GeneratorTrainer(GeneratorModel.create(config, fresh_vae), tiny_corpus, config, tmp_path / 'run')

    def test_alignment_iou_is_a_fraction(self, tiny_corpus, micro_model):
        latents = encode_images(micro_model.vae, [s.image for s in tiny_corpus.abnormal])
        masks = torch.from_numpy(np.stack([s.mask for s in tiny_corpus.abnormal]))
        types = [s.anomaly_type for s in tiny_corpus.abnormal]
        value = alignment_iou(micro_model, latents, masks, types, [2, 3], 500)
        assert 0.0 <= value <= 1.0


class TestVAEPretraining:
    def test_saves_checkpoint_with_latent_scale(self, tiny_corpus, micro_config, tmp_path):
        result = pretrain_vae(tiny_corpus, micro_config, tmp_path / 'ckpt')
        assert (tmp_path / 'ckpt' / 'vae.pt').exists()
        assert math.isfinite(result['reconstruction_mae'])
        assert result['vae'].latent_scale.item() > 0

    def test_heldout_check_uses_fresh_normals(self, tiny_corpus, micro_config, tmp_path):
        heldout = heldout_normals(micro_config)
        assert len(heldout) == micro_config.vae.heldout_count
        assert all(h.shape == (32, 32, 3) for h in heldout)
        assert all(np.array_equal(a, b) for a, b in zip(heldout, heldout_normals(micro_config)))
        assert not any(np.array_equal(h, s.image) for h in heldout for s in tiny_corpus.normal)
        result = pretrain_vae(tiny_corpus, micro_config, tmp_path / 'ckpt')
        assert result['heldout_mae'] == pytest.approx(reconstruction_mae(result['vae'], heldout))
        assert 0.0 <= result['heldout_mae'] <= 1.0
        assert 'heldout_mae=' in (tmp_path / 'ckpt' / 'train_log.txt').read_text()

    def test_heldout_check_can_be_disabled(self, tiny_corpus, tmp_path):
        config = config_from_dict(micro_config_dict(vae={'heldout_count': 0})).validate()
        assert pretrain_vae(tiny_corpus, config, tmp_path / 'ckpt')['heldout_mae'] is None


class TestRMPTraining:
    def test_trains_against_frozen_generator(self, tiny_corpus, micro_config, fresh_vae, checkpoint_dir):
        generated = train_generator(tiny_corpus, micro_config, fresh_vae, checkpoint_dir)
        result = train_rmp(tiny_corpus, checkpoint_dir, micro_config, checkpoint_dir)
        assert result['generator_fingerprint'] == generated['fingerprints']['generator']
        assert (checkpoint_dir / 'rmp.pt').exists()
        assert len(result['history']) == 2
        quality = evaluate_rmp_on_corpus(result['model'], result['rmp'], tiny_corpus, micro_config)
        assert set(quality) == {'pixel_auroc', 'pixel_ap', 'pixel_f1max', 'iou'}
        assert all(0.0 <= v <= 1.0 for v in quality.values())

    def test_refuses_trainable_generator(self, tiny_corpus, micro_config, fresh_vae, tmp_path):
        model = GeneratorModel.create(micro_config, fresh_vae)
        with pytest.raises(ConfigurationError):
            RMPTrainer(model, build_rmp(model, micro_config.rmp), tiny_corpus, micro_config, tmp_path)

    def test_missing_generator_checkpoint(self, tiny_corpus, micro_config, tmp_path):
        with pytest.raises(ConfigurationError):
            train_rmp(tiny_corpus, tmp_path / 'nothing', micro_config, tmp_path / 'out')
