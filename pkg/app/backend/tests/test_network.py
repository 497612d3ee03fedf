"""
Backbone tests: shape laws, attention and residual identities, token
layout, decoder normalization and a full-model finite-difference check.
"""

import math

import pytest
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from model.models import LossWeights, ModelConfig
from services.adaptation import adversarial_loss, domain_classify, global_average_pool, mmd2_unbiased
from services.losses import seg_loss
from services.network import (
    MultiHeadSelfAttention,
    PatchEmbedding,
    TransformerBlock,
    TransformerEncoder,
    build_model,
    tokens_to_volume,
)
from utils.errors import ShapeError


class TestShapeLaws:
    def test_full_size_constants(self):
        cfg = ModelConfig.full_size()
        assert cfg.stage_shape("enc3") == (128, 24, 24, 24)
        assert cfg.num_tokens == 27
        assert cfg.head_dim == 64
        assert cfg.stage_shape("vit_out") == (512, 24, 24, 24)
        assert cfg.stage_shape("dec3")[1:] == (192, 192, 192)

    def test_full_size_patch_embed_and_transformer(self):
        torch.manual_seed(0)
        cfg = ModelConfig.full_size()
        f3 = torch.randn(1, *cfg.stage_shape("enc3"))
        with torch.no_grad():
            tokens = PatchEmbedding(cfg)(f3)
            assert tokens.shape == (1, 27, 512)
            encoded = TransformerEncoder(cfg)(tokens)
            assert encoded.shape == (1, 27, 512)
            assert tokens_to_volume(encoded, cfg.patch_side).shape == (1, 512, 24, 24, 24)

    def test_desk_encoder(self):
        cfg = ModelConfig.desk()
        model = build_model(cfg)
        f1, f2, f3 = model.cnn_encode(torch.randn(2, 1, 64, 64, 64))
        assert f1.shape == (2, 8, 32, 32, 32)
        assert f2.shape == (2, 16, 16, 16, 16)
        assert f3.shape == (2, 32, 8, 8, 8)
        assert model.patch_embed(f3).shape == (2, 64, 64)

    @pytest.mark.parametrize("factory", [ModelConfig.tiny, ModelConfig.desk, ModelConfig])
    def test_forward_shapes(self, factory):
        cfg = factory()
        model = build_model(cfg).eval()
        s = cfg.input_side
        with torch.no_grad():
            prob, vit_out = model(torch.randn(1, 1, s, s, s))
        assert prob.shape == (1, cfg.num_classes, s, s, s)
        assert vit_out.shape == (1, *cfg.stage_shape("vit_out"))

    def test_zero_input_is_finite(self):
        model = build_model(ModelConfig.tiny())
        f1, f2, f3 = model.cnn_encode(torch.zeros(2, 1, 16, 16, 16))
        assert torch.isfinite(f3).all()
        assert f3.shape == (2, 8, 2, 2, 2)

    def test_wrong_input_shape(self):
        model = build_model(ModelConfig.tiny())
        with pytest.raises(ShapeError):
            model.cnn_encode(torch.zeros(1, 1, 16, 16, 8))

    def test_invalid_configs(self):
        with pytest.raises(ValidationError):
            ModelConfig(input_side=20, patch_side=2)
        with pytest.raises(ValidationError):
            ModelConfig(embed_dim=48, num_heads=5)


class TestPatchEmbedding:
    def test_zero_positions_give_pure_projection(self):
        cfg = ModelConfig.tiny()
        embed = PatchEmbedding(cfg)
        with torch.no_grad():
            embed.pos_embedding.zero_()
            f3 = torch.randn(2, *cfg.stage_shape("enc3"))
            expected = embed.proj(f3).flatten(2).transpose(1, 2)
            torch.testing.assert_close(embed(f3), expected)

    def test_token_layout_round_trip(self):
        cfg = ModelConfig(input_side=32, base_channels=2, embed_dim=16, num_heads=2, patch_side=1)
        g, p = cfg.token_grid, cfg.patch_side
        embed = PatchEmbedding(cfg)
        index = torch.arange(g**3, dtype=torch.float32).reshape(g, g, g)
        f3 = torch.zeros(1, cfg.encoder_channels[2], g, g, g)
        f3[0, 0] = index
        with torch.no_grad():
            embed.pos_embedding.zero_()
            embed.proj.weight.zero_()
            embed.proj.bias.zero_()
            embed.proj.weight[0, 0] = 1.0
            tokens = embed(f3)
        assert torch.equal(tokens[0, :, 0], torch.arange(g**3, dtype=torch.float32))
        volume = tokens_to_volume(tokens, p)
        assert torch.equal(volume[0, 0], index)

    def test_broadcast_over_patch(self):
        tokens = torch.arange(8, dtype=torch.float64).reshape(1, 8, 1)
        volume = tokens_to_volume(tokens, 2)
        assert volume.shape == (1, 1, 4, 4, 4)
        # token 5 = grid (1, 0, 1) covers voxels [2:4, 0:2, 2:4]
        assert torch.all(volume[0, 0, 2:4, 0:2, 2:4] == 5)

    def test_non_cubic_token_count(self):
        with pytest.raises(ShapeError):
            tokens_to_volume(torch.zeros(1, 7, 4), 2)


class TestTransformer:
    def test_single_token_attention_returns_values(self):
        torch.manual_seed(1)
        attn = MultiHeadSelfAttention(16, 4)
        x = torch.randn(3, 1, 16)
        v = attn.to_qkv(x).chunk(3, dim=-1)[2]
        torch.testing.assert_close(attn.context(x), v)

    def test_zero_weights_leave_residual_path(self):
        block = TransformerBlock(8, 2, 16)
        with torch.no_grad():
            for module in (block.attn.to_qkv, block.attn.to_out, block.mlp.fc1, block.mlp.fc2):
                module.weight.zero_()
                module.bias.zero_()
        x = torch.randn(1, 2, 8)
        torch.testing.assert_close(block(x), x)


class TestDecoder:
    def test_probability_simplex(self):
        model = build_model(ModelConfig.tiny()).eval()
        with torch.no_grad():
            prob, _ = model(torch.randn(2, 1, 16, 16, 16))
        assert torch.all(prob >= 0)
        assert torch.allclose(prob.sum(dim=1), torch.ones_like(prob[:, 0]), atol=1e-6)

    def test_trilinear_upsample_of_constant(self):
        x = torch.full((1, 3, 4, 4, 4), 2.5)
        up = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        assert torch.allclose(up, torch.full_like(up, 2.5))

    def test_eval_is_deterministic(self):
        model = build_model(ModelConfig.tiny()).eval()
        x = torch.randn(1, 1, 16, 16, 16)
        with torch.no_grad():
            a, _ = model(x)
            b, _ = model(x)
        assert torch.equal(a, b)


class TestGradientCheck:
    def test_full_model_matches_finite_differences(self, float64):
        torch.manual_seed(0)
        model = build_model(ModelConfig.tiny(), dtype=torch.float64).eval()
        weights = LossWeights(alpha_mix=0.4)
        x = torch.randn(4, 1, 16, 16, 16)
        y = (torch.rand(2, 16, 16, 16) > 0.8).double()
        labels = torch.tensor([0, 0, 1, 1])

        def objective() -> torch.Tensor:
            prob, vit_out = model(x)
            seg = seg_loss(prob[:2, 1], y, weights)
            adv = adversarial_loss(domain_classify(vit_out, model.domain_head), labels)
            pooled = global_average_pool(vit_out)
            mmd2 = mmd2_unbiased(pooled[:2], pooled[2:], [0.25, 1 / math.sqrt(2), 1.0, math.sqrt(2), 2.0])
            return seg + weights.alpha_adv * adv + weights.beta_mmd * mmd2

        model.zero_grad()
        objective().backward()

        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        generator = torch.Generator().manual_seed(7)
        h = 1e-6
        checked = 0
        for _ in range(24):
            name, param = named[int(torch.randint(len(named), (1,), generator=generator))]
            flat_index = int(torch.randint(param.numel(), (1,), generator=generator))
            analytic = float(param.grad.reshape(-1)[flat_index])
            with torch.no_grad():
                flat = param.data.view(-1)
                original = float(flat[flat_index])
                flat[flat_index] = original + h
                plus = float(objective())
                flat[flat_index] = original - h
                minus = float(objective())
                flat[flat_index] = original
            numeric = (plus - minus) / (2 * h)
            assert abs(analytic - numeric) <= 1e-5 * max(abs(analytic), abs(numeric)) + 1e-8, (
                f"{name}[{flat_index}]: analytic {analytic} vs numeric {numeric}"
            )
            checked += 1
        assert checked >= 20
