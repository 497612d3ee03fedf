"""
Segmentation backbone: 3D CNN encoder, 3D ViT encoder over patch tokens,
and a skip-connected decoder with trilinear upsampling.

The domain head rides on the same module so every trainable array lives in
one state dict and one checkpoint.
"""

import logging
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat

from model.models import ModelConfig
from services.adaptation import DomainClassifier
from utils.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
POS_EMBED_STD = 0.02


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    """Two 3x3x3 conv + BN + ReLU layers."""
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm3d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm3d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=True),
    )


class CnnEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.encoder_channels
        self.enc1 = conv_block(1, c1)
        self.enc2 = conv_block(c1, c2)
        self.enc3 = conv_block(c2, c3)
        self.pool = nn.MaxPool3d(kernel_size=2)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        f1 = self.pool(self.enc1(x))
        f2 = self.pool(self.enc2(f1))
        f3 = self.pool(self.enc3(f2))
        return f1, f2, f3


class PatchEmbedding(nn.Module):
    """Non-overlapping p^3 patches projected to d, plus learned positions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_side = cfg.patch_side
        self.grid = cfg.token_grid
        self.proj = nn.Conv3d(
            cfg.encoder_channels[2],
            cfg.embed_dim,
            kernel_size=cfg.patch_side,
            stride=cfg.patch_side,
        )
        self.pos_embedding = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        nn.init.normal_(self.pos_embedding, std=POS_EMBED_STD)

    def forward(self, f3: torch.Tensor) -> torch.Tensor:
        side = f3.shape[-1]
        if side % self.patch_side != 0:
            raise ConfigurationError(
                f"feature side {side} is not divisible by patch side {self.patch_side}",
                field="model.patch_side",
            )
        if side // self.patch_side != self.grid:
            raise ShapeError(
                f"feature side {side} gives a {side // self.patch_side}^3 token grid, "
                f"positional table expects {self.grid}^3"
            )
        tokens = rearrange(self.proj(f3), "b d z y x -> b (z y x) d")
        return tokens + self.pos_embedding


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(
                f"embed_dim {dim} is not divisible by num_heads {heads}", field="model.num_heads"
            )
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def context(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated per-head attention outputs, before the output projection."""
        q, k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads)
            for t in self.to_qkv(x).chunk(3, dim=-1)
        )
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        return rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_out(self.context(x))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_hidden)
                for _ in range(cfg.num_blocks)
            ]
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.layers:
            tokens = block(tokens)
        return tokens


def tokens_to_volume(tokens: torch.Tensor, patch_side: int) -> torch.Tensor:
    """
    (B, N, d) tokens -> (B, d, g*p, g*p, g*p) volume.

    Token k sits at its patch-grid coordinate (row-major z, y, x, the order
    the patch embedding flattened in) and its d-vector is repeated over the
    p^3 voxels of that patch.
    """
    n = tokens.shape[1]
    grid = round(n ** (1.0 / 3.0))
    if grid**3 != n:
        raise ShapeError(f"token count {n} is not a perfect cube")
    return repeat(
        tokens,
        "b (z y x) d -> b d (z pz) (y py) (x px)",
        z=grid,
        y=grid,
        x=grid,
        pz=patch_side,
        py=patch_side,
        px=patch_side,
    )


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.skip_ch = skip_ch
        self.block = conv_block(in_ch + skip_ch, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor = None) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        if skip is not None:
            if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
                raise ShapeError(
                    f"skip of shape {tuple(skip.shape)} does not match upsampled "
                    f"features {tuple(x.shape)}"
                )
            if skip.shape[1] != self.skip_ch:
                raise ShapeError(f"skip has {skip.shape[1]} channels, expected {self.skip_ch}")
            x = torch.cat([x, skip], dim=1)
        return self.block(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, _ = cfg.encoder_channels
        k1, k2, k3 = cfg.decoder_channels
        self.stage1 = DecoderStage(cfg.embed_dim, c2, k1)
        self.stage2 = DecoderStage(k1, c1, k2)
        self.stage3 = DecoderStage(k2, 0, k3)
        self.head = nn.Conv3d(k3, cfg.num_classes, kernel_size=1)

    def forward(
        self, vit_out: torch.Tensor, skips: Tuple[torch.Tensor, torch.Tensor]
    ) -> torch.Tensor:
        f1, f2 = skips
        x = self.stage1(vit_out, f2)
        x = self.stage2(x, f1)
        x = self.stage3(x)
        return torch.softmax(self.head(x), dim=1)


class PFDAformer(nn.Module):
    """CNN + ViT encoder-decoder with an attached domain classifier."""

    def __init__(self, cfg: ModelConfig, head_dropout: float = 0.2):
        super().__init__()
        self.cfg = cfg
        self.encoder = CnnEncoder(cfg)
        self.embedding = PatchEmbedding(cfg)
        self.transformer = TransformerEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.domain_head = DomainClassifier(cfg.domain_head_widths, dropout=head_dropout)

    def cnn_encode(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        s = self.cfg.input_side
        if x.dim() != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != (s, s, s):
            raise ShapeError(f"expected input of shape (B, 1, {s}, {s}, {s}), got {tuple(x.shape)}")
        return self.encoder(x)

    def patch_embed(self, f3: torch.Tensor) -> torch.Tensor:
        return self.embedding(f3)

    def transformer_encode(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.transformer(tokens)

    def tokens_to_volume(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens_to_volume(tokens, self.cfg.patch_side)

    def decode(
        self, vit_out: torch.Tensor, skips: Tuple[torch.Tensor, torch.Tensor]
    ) -> torch.Tensor:
        return self.decoder(vit_out, skips)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns the (B, K, S, S, S) probability map and the ViT feature volume."""
        f1, f2, f3 = self.cnn_encode(x)
        tokens = self.transformer_encode(self.patch_embed(f3))
        vit_out = self.tokens_to_volume(tokens)
        return self.decode(vit_out, (f1, f2)), vit_out


def build_model(cfg: ModelConfig, head_dropout: float = 0.2, dtype: torch.dtype = torch.float32) -> PFDAformer:
    model = PFDAformer(cfg, head_dropout=head_dropout).to(dtype=dtype)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(
        f"🔧 Built PFDAformer: S={cfg.input_side}, d={cfg.embed_dim}, L={cfg.num_blocks}, "
        f"{cfg.num_tokens} tokens, {n_params:,} parameters"
    )
    return model
