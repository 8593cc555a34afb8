"""Mask branch: focal loss, refinement modules and the forward chain"""
from dataclasses import replace

import pytest
import torch
import torch.nn.functional as F

from backbone.schedule import forward_diffuse
from recovery.errors import ConfigurationError, DimensionError, RangeError, ValidationError
from rmp.features import step_features
from rmp.losses import focal_loss, rmp_loss
from rmp.modules import MaskRefinementModule, RefinedMask, RefinedMaskPredictor
from rmp.trainer import build_rmp


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())


class TestFocalLoss:
    def test_reduces_to_cross_entropy(self):
        torch.manual_seed(0)
        logits = torch.randn(2, 2, 5, 5, dtype=torch.float64)
        target = (torch.rand(2, 5, 5) > 0.5).long()
        expected = F.cross_entropy(logits, target)
        assert focal_loss(logits, target, gamma=0.0, alpha=None).item() == pytest.approx(expected.item())

    def test_confident_correct_pixels_are_down_weighted(self):
        logits = torch.tensor([4.0, -4.0], dtype=torch.float64).view(1, 2, 1, 1)
        target = torch.zeros(1, 1, 1)
        assert focal_loss(logits, target, gamma=2.0, alpha=None) < focal_loss(logits, target, gamma=0.0, alpha=None)

    def test_alpha_weights_classes(self):
        logits = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        target = torch.tensor([[[1, 0]]])
        # each pixel has -log(0.5) * 0.25 before weighting
        base = torch.log(torch.tensor(2.0, dtype=torch.float64)) * 0.25
        value = focal_loss(logits, target, gamma=2.0, alpha=0.75)
        assert value.item() == pytest.approx((0.75 * base + 0.25 * base).item() / 2)

    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            focal_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 2))
        with pytest.raises(DimensionError):
            focal_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 4, 4))


class TestRMPLoss:
    def test_normal_supervision_off_drops_normal_terms(self):
        torch.manual_seed(0)
        coarse = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        refined = torch.randn(2, 2, 16, 16, dtype=torch.float64)
        gt = torch.zeros(2, 16, 16)
        gt[:, 2:6, 2:6] = 1
        with_normal = rmp_loss(coarse, refined, coarse, refined, gt)
        without = rmp_loss(coarse, refined, coarse, refined, gt, normal_supervision=False)
        assert without.coarse_ob.item() == 0 and without.refined_ob.item() == 0
        assert without.refined_df.item() == pytest.approx(with_normal.refined_df.item())
        assert with_normal.total.item() == pytest.approx(
            sum(with_normal.as_floats()[k] for k in ('coarse_df', 'refined_df', 'coarse_ob', 'refined_ob')))

    def test_coarse_supervision_off(self):
        coarse = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        refined = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
        gt = torch.ones(1, 8, 8)
        loss = rmp_loss(coarse, refined, None, None, gt, coarse_supervision=False)
        assert loss.coarse_df.item() == 0
        assert loss.refined_df.item() > 0

    def test_gradient_with_respect_to_logits(self, max_relative_error):
        torch.manual_seed(1)
        gt = torch.zeros(1, 8, 8)
        gt[:, 1:5, 2:6] = 1
        base = torch.randn(2, 1, 2, 8, 8, dtype=torch.float64)

        def total(logits):
            refined_df, refined_ob = logits[0], logits[1]
            coarse_df = F.avg_pool2d(refined_df, 2)
            coarse_ob = F.avg_pool2d(refined_ob, 2)
            return rmp_loss(coarse_df, refined_df, coarse_ob, refined_ob, gt).total

        assert torch.autograd.gradcheck(total, (base.clone().requires_grad_(True),))
        assert max_relative_error(total, base) < 1e-4

    def test_abnormal_prediction_needs_mask(self):
        with pytest.raises(ValidationError):
            rmp_loss(None, torch.zeros(1, 2, 4, 4), None, None, None)

    def test_log_line(self):
        loss = rmp_loss(None, None, None, torch.zeros(1, 2, 4, 4), None)
        assert loss.log_line(3).startswith('step=3 coarse_df=0.000000')


class TestMaskRefinementModule:
    def test_doubles_resolution(self):
        mrm = MaskRefinementModule(6, 4).double()
        out = mrm(torch.randn(2, 6, 4, 4, dtype=torch.float64), torch.randn(2, 4, 8, 8, dtype=torch.float64))
        assert out.shape == (2, 4, 8, 8)

    def test_variants_grow_in_size(self):
        counts = [parameter_count(MaskRefinementModule(8, 8, variant)) for variant in 'abc']
        assert counts[0] < counts[1] < counts[2]

    def test_zero_vae_feature_leaves_fuse_bias(self):
        mrm = MaskRefinementModule(3, 4).double()
        out = mrm(torch.randn(1, 3, 2, 2, dtype=torch.float64), torch.zeros(1, 4, 4, 4, dtype=torch.float64))
        expected = mrm.fuse.bias.view(1, 4, 1, 1).expand_as(out)
        assert torch.allclose(out, expected)

    def test_resolution_mismatch(self):
        mrm = MaskRefinementModule(3, 4)
        with pytest.raises(DimensionError):
            mrm(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4, 8, 8))

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            MaskRefinementModule(3, 4, 'd')


class TestRefinedMask:
    def test_binary_threshold(self):
        logits = torch.zeros(1, 2, 1, 3, dtype=torch.float64)
        logits[0, 1, 0] = torch.tensor([-5.0, 0.0, 5.0], dtype=torch.float64)
        mask = RefinedMask.from_logits(logits)
        assert torch.allclose(mask.scores.sum(dim=1), torch.ones(1, 1, 3, dtype=torch.float64))
        assert mask.binary(0.2).tolist() == [[[False, True, True]]]
        with pytest.raises(RangeError):
            mask.binary(1.0)


class TestForwardChain:
    @pytest.fixture
    def features(self, micro_model):
        torch.manual_seed(2)
        latents = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        noisy = forward_diffuse(latents, 1, torch.randn_like(latents), micro_model.schedule)
        conditioning = micro_model.conditioning([micro_model.prompt(1), micro_model.prompt(2)])
        return step_features(micro_model, noisy, 1, conditioning)

    def test_shapes(self, micro_rmp, features):
        out = micro_rmp(features.decoder_features, features.vae_features)
        assert out.coarse_logits.shape == (2, 2, 4, 4)
        assert out.refined_logits.shape == (2, 2, 32, 32)
        refined = out.refined
        assert torch.allclose(refined.scores.sum(dim=1), torch.ones(2, 32, 32, dtype=torch.float64))
        assert refined.anomaly_scores.min() >= 0 and refined.anomaly_scores.max() <= 1

    def test_vae_features_follow_latent_resolution(self, features):
        assert [f.shape[-1] for f in features.vae_features] == [8, 16, 32]
        assert features.predicted_clean.shape == (2, 4, 8, 8)

    @pytest.mark.parametrize('refinement', ['single', 'coarse_only'])
    def test_refinement_variants(self, micro_model, micro_config, features, refinement):
        config = replace(micro_config.rmp, refinement=refinement)
        rmp = build_rmp(micro_model, config).double()
        out = rmp(features.decoder_features, features.vae_features)
        assert out.refined_logits.shape == (2, 2, 32, 32)
        if refinement == 'coarse_only':
            assert len(rmp.mrms) == 0

    def test_coarse_only_pass(self, micro_rmp, features):
        out = micro_rmp.forward_coarse(features.decoder_features)
        assert torch.allclose(out.refined_logits, micro_rmp.upsampled_coarse(out.coarse_logits))

    def test_missing_decoder_stage(self, micro_rmp, features):
        partial = {k: v for k, v in features.decoder_features.items() if k != 'up-2'}
        with pytest.raises(ConfigurationError):
            micro_rmp(partial, features.vae_features)

    def test_unknown_stage_rejected(self, micro_model, micro_config):
        config = replace(micro_config.rmp, unet_features=['up-7', 'up-2', 'up-3'])
        with pytest.raises(ConfigurationError):
            RefinedMaskPredictor(config, micro_model.unet.stage_channels(), micro_model.unet.stage_resolutions(),
                                 (8, 4, 4), 32)
