"""Alignment losses, the normal-image term and their gradients"""
import pytest
import torch

from backbone.unet import AttentionStack, UNetOutputs
from prompts.ua_prompt import UAPrompt
from recovery.errors import ConfigurationError, DivergenceError, ValidationError
from training.losses import (LossBreakdown, LossWeights, abnormal_loss, at_term, at_variant_loss, da_loss,
                             downsample_mask, draw_diffusion, normal_loss)

MASK = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)


def hand_prompt():
    # columns: 0 -> ob1, 1 -> df1, 2 -> df2, 3 -> pad
    return UAPrompt(anomaly_type=1, normal_tokens=['ob1'], anomaly_tokens=['df1', 'df2'],
                    token_ids=[0, 1, 2, 3], ob_columns=[0], df_columns=[1, 2])


def hand_stack(a_ob, a_df1, a_df2):
    maps = torch.stack([a_ob, a_df1, a_df2, torch.zeros_like(a_ob)], dim=-1)[None]
    return AttentionStack({1: maps})


def hand_masks():
    return downsample_mask(MASK, {1: 2})


class TestDownsampleMask:
    def test_block_maps_to_single_cell(self):
        mask = torch.zeros(64, 64)
        mask[0:2, 0:2] = 1
        pooled = downsample_mask(mask, {1: 16}).layer(1)
        assert pooled.shape == (1, 16, 16)
        assert pooled.sum() == 1 and pooled[0, 0, 0] == 1

    def test_single_pixel_lights_one_cell_per_layer(self):
        mask = torch.zeros(32, 32)
        mask[17, 9] = 1
        pooled = downsample_mask(mask, {1: 8, 2: 4, 3: 2, 4: 1})
        for layer, resolution in {1: 8, 2: 4, 3: 2, 4: 1}.items():
            assert pooled.layer(layer).sum() == 1
            assert pooled.layer(layer).shape[-1] == resolution

    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError):
            downsample_mask(torch.full((8, 8), 0.5), {1: 2})

    def test_missing_layer(self):
        with pytest.raises(ConfigurationError):
            downsample_mask(torch.zeros(8, 8), {1: 2}).layer(3)


class TestDecoupledAlignment:
    def test_hand_oracle(self):
        a_df1 = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        a_df2 = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        a_ob = torch.tensor([[0.5, 0.0], [0.0, 0.0]], dtype=torch.float64)
        term1, term2 = da_loss(hand_stack(a_ob, a_df1, a_df2), hand_prompt(), hand_masks(), [1])
        assert term1.item() == pytest.approx(0.5)
        assert term2.item() == pytest.approx(0.25)

    def test_perfect_alignment_is_zero(self):
        a_ob = torch.tensor([[0.0, 0.7], [0.7, 0.7]], dtype=torch.float64)
        term1, term2 = da_loss(hand_stack(a_ob, MASK, MASK), hand_prompt(), hand_masks(), [1])
        assert term1.item() == 0.0 and term2.item() == 0.0

    def test_normal_prompt_rejected(self):
        prompt = UAPrompt(anomaly_type=0, normal_tokens=['ob1'], anomaly_tokens=[], token_ids=[0, 3, 3, 3],
                          ob_columns=[0])
        with pytest.raises(ConfigurationError):
            da_loss(hand_stack(MASK, MASK, MASK), prompt, hand_masks(), [1])

    def test_alternative_term_hand_oracle(self):
        a_ob = torch.tensor([[0.5, 0.0], [0.0, 0.0]], dtype=torch.float64)
        value = at_term(hand_stack(a_ob, MASK, MASK), hand_prompt(), hand_masks(), [1])
        assert value.item() == pytest.approx(3.25)

    def test_gradient_with_respect_to_attention(self, max_relative_error):
        torch.manual_seed(0)
        base = torch.rand(1, 2, 2, 4, dtype=torch.float64)

        def total(maps):
            term1, term2 = da_loss(AttentionStack({1: maps}), hand_prompt(), hand_masks(), [1])
            return term1 + term2

        assert torch.autograd.gradcheck(total, (base.clone().requires_grad_(True),))
        assert max_relative_error(total, base) < 1e-4

    def test_head_permutation_leaves_loss_unchanged(self, micro_model):
        prompt = micro_model.prompt(1)
        conditioning = micro_model.conditioning([prompt])
        latents = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        masks = torch.zeros(1, 32, 32, dtype=torch.float64)
        masks[:, 4:12, 4:12] = 1
        draw = draw_diffusion(latents, micro_model.schedule, torch.Generator().manual_seed(0))
        layers = [1, 2, 3]

        def terms():
            result = abnormal_loss(micro_model.unet, micro_model.schedule, latents, masks, conditioning, prompt,
                                   draw, layers)
            return result.da_term1.item(), result.da_term2.item()

        before = terms()
        with torch.no_grad():
            for module in micro_model.unet.modules():
                if hasattr(module, 'to_q') and hasattr(module, 'to_out'):
                    half = module.to_q.weight.shape[0] // 2
                    order = torch.cat([torch.arange(half, 2 * half), torch.arange(half)])
                    for proj in (module.to_q, module.to_k, module.to_v):
                        proj.weight.copy_(proj.weight[order])
                    module.to_out.weight.copy_(module.to_out.weight[:, order])
        after = terms()
        assert after == pytest.approx(before, rel=1e-10, abs=1e-12)


class TestAbnormalLoss:
    def test_gradient_with_respect_to_anomaly_token(self, micro_model, max_relative_error):
        torch.manual_seed(1)
        prompt = micro_model.prompt(2)
        base = micro_model.conditioning([prompt])[0].detach()
        column = prompt.df_columns[0]
        latents = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        masks = torch.zeros(2, 32, 32, dtype=torch.float64)
        masks[0, 0:16, 0:16] = 1
        masks[1, 20:28, 8:30] = 1
        draw = draw_diffusion(latents, micro_model.schedule, torch.Generator().manual_seed(3))

        def total(row):
            conditioning = torch.cat([base[:column], row[None], base[column + 1:]])
            terms = abnormal_loss(micro_model.unet, micro_model.schedule, latents, masks, conditioning, prompt,
                                  draw, [1, 2])
            return terms.da_term1 + terms.da_term2 + terms.diffusion_df

        row = base[column].clone()
        assert torch.autograd.gradcheck(total, (row.requires_grad_(True),), eps=1e-6, atol=1e-5)
        assert max_relative_error(total, row) < 1e-4

    def test_empty_mask_rejected(self, micro_model):
        prompt = micro_model.prompt(1)
        latents = torch.zeros(1, 4, 8, 8, dtype=torch.float64)
        draw = draw_diffusion(latents, micro_model.schedule)
        with pytest.raises(ValidationError):
            abnormal_loss(micro_model.unet, micro_model.schedule, latents, torch.zeros(1, 32, 32),
                          micro_model.conditioning([prompt]), prompt, draw, [1])
        with pytest.raises(ValidationError):
            abnormal_loss(micro_model.unet, micro_model.schedule, latents, None,
                          micro_model.conditioning([prompt]), prompt, draw, [1])


class NoiseOracle(torch.nn.Module):
    """Returns the exact noise that produced each noisy latent"""

    def __init__(self, clean, schedule):
        super().__init__()
        self.clean = clean
        self.schedule = schedule

    def forward(self, noisy, t, conditioning):
        alpha = self.schedule.alpha[t].view(-1, 1, 1, 1).to(noisy.dtype)
        beta = self.schedule.beta[t].view(-1, 1, 1, 1).to(noisy.dtype)
        return UNetOutputs((noisy - alpha * self.clean) / beta, AttentionStack(), {})


class TestNormalLoss:
    def test_perfect_predictor_gives_zero(self, micro_model):
        latents = torch.randn(3, 4, 8, 8, dtype=torch.float64)
        draw = draw_diffusion(latents, micro_model.schedule, torch.Generator().manual_seed(5))
        draw.t = draw.t.clamp_min(1)
        oracle = NoiseOracle(latents, micro_model.schedule)
        conditioning = micro_model.conditioning([micro_model.normal_prompt()])
        assert normal_loss(oracle, micro_model.schedule, latents, conditioning, draw).item() == pytest.approx(
            0.0, abs=1e-16)

    def test_gradient_with_respect_to_normal_token(self, micro_model, max_relative_error):
        torch.manual_seed(2)
        prompt = micro_model.normal_prompt()
        base = micro_model.conditioning([prompt])[0].detach()
        column = prompt.ob_columns[0]
        latents = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        draw = draw_diffusion(latents, micro_model.schedule, torch.Generator().manual_seed(4))

        def total(row):
            conditioning = torch.cat([base[:column], row[None], base[column + 1:]])
            return normal_loss(micro_model.unet, micro_model.schedule, latents, conditioning, draw)

        row = base[column].clone()
        assert torch.autograd.gradcheck(total, (row.requires_grad_(True),), eps=1e-6, atol=1e-5)
        assert max_relative_error(total, row) < 1e-4


class TestATVariantLoss:
    def test_without_normal_images_only_alignment_remains(self):
        a_ob = torch.tensor([[0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
        stack = hand_stack(a_ob, MASK, MASK)
        alignment, diffusion = at_variant_loss(stack, hand_prompt(), MASK, None, None, None, None, None, [1])
        assert alignment.item() == pytest.approx(0.0)
        assert diffusion.item() == 0.0

    def test_gradient_with_respect_to_attention(self, max_relative_error):
        torch.manual_seed(4)
        base = torch.rand(1, 2, 2, 4, dtype=torch.float64)

        def total(maps):
            alignment, diffusion = at_variant_loss(AttentionStack({1: maps}), hand_prompt(), MASK,
                                                   None, None, None, None, None, [1])
            return alignment + diffusion

        assert torch.autograd.gradcheck(total, (base.clone().requires_grad_(True),))
        assert max_relative_error(total, base) < 1e-4

    def test_gradient_with_respect_to_normal_token(self, micro_model, max_relative_error):
        torch.manual_seed(5)
        prompt = micro_model.normal_prompt()
        base = micro_model.conditioning([prompt])[0].detach()
        column = prompt.ob_columns[0]
        latents = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        draw = draw_diffusion(latents, micro_model.schedule, torch.Generator().manual_seed(7))
        stack = hand_stack(torch.rand(2, 2, dtype=torch.float64), MASK, MASK)

        def total(row):
            conditioning = torch.cat([base[:column], row[None], base[column + 1:]])
            alignment, diffusion = at_variant_loss(stack, hand_prompt(), MASK, micro_model.unet,
                                                   micro_model.schedule, latents, conditioning, draw, [1])
            return alignment + diffusion

        row = base[column].clone()
        assert torch.autograd.gradcheck(total, (row.requires_grad_(True),), eps=1e-6, atol=1e-5)
        assert max_relative_error(total, row) < 1e-4


class TestLossBreakdown:
    def test_zero_alignment_weight_leaves_diffusion(self):
        value = torch.tensor(0.3, dtype=torch.float64)
        breakdown = LossBreakdown(torch.tensor(5.0), torch.tensor(7.0), torch.tensor(0.0), value,
                                  torch.tensor(0.0), LossWeights(da=0.0))
        assert breakdown.total.item() == pytest.approx(0.3)

    def test_log_line_lists_every_term(self):
        line = LossBreakdown.zeros().log_line(12)
        assert line.startswith('step=12 ')
        for name in ('da_term1', 'da_term2', 'at_term', 'diffusion_df', 'diffusion_ob', 'total'):
            assert f'{name}=0.000000' in line

    def test_non_finite_raises_divergence(self):
        breakdown = LossBreakdown.zeros()
        breakdown.diffusion_df = torch.tensor(float('nan'))
        with pytest.raises(DivergenceError):
            breakdown.check_finite(4)
