"""
Multi-reference customization UNet

Two encoder paths with identical layer shapes and separate parameters:
  - the feature path encodes z_lambda and cross-attends to the prompt C
  - the reference path encodes the time-concatenated reference latents R and
    cross-attends to the reference caption embeddings E
Each decoder level adds a zero-initialized projection of the same-level
reference feature, concatenates the feature-path skip, then cross-attends to
C and to E. At initialization the reference branch therefore contributes
exactly zero.
"""

import math
from typing import Optional

import msgspec
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .. import settings
from ..errors import RefAudioValueError


class MRCConfig(msgspec.Struct, kw_only=True):
    n_hidden: int = settings.N_HIDDEN
    latent_channels: int = settings.DETERMINISTIC_CHANNELS
    d_text: int = settings.D_TEXT
    k_max: int = settings.K_MAX
    channel_mult: tuple[int, ...] = (1, 2, 4)
    heads: int = 4
    align_grid: tuple[int, int] = settings.ALIGN_GRID
    # learnable alignment conv ahead of the fixed-grid pooling (reference-count adaptation)
    use_alignment: bool = False

    def __post_init__(self) -> None:
        if self.n_hidden < 8 or self.n_hidden % 8:
            raise RefAudioValueError(f"n_hidden must be a positive multiple of 8, got {self.n_hidden}")
        if not self.channel_mult:
            raise RefAudioValueError("channel_mult needs at least one level")
        if any((self.n_hidden * m) % self.heads for m in self.channel_mult):
            raise RefAudioValueError("every level width must be divisible by heads")
        if self.k_max < 1:
            raise RefAudioValueError("k_max must be at least 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "MRCConfig":
        widths = {
            "desk": settings.N_HIDDEN,
            "paper": settings.N_HIDDEN_PAPER,
            "paper-large": settings.N_HIDDEN_PAPER_LARGE,
        }
        if name not in widths:
            raise RefAudioValueError(f"unknown model preset {name!r}; choose from {sorted(widths)}")
        base = {"n_hidden": widths[name]}
        if name != "desk":
            base["d_text"] = settings.D_TEXT_PAPER
        base.update(overrides)
        return cls(**base)

    @property
    def widths(self) -> list[int]:
        return [self.n_hidden * m for m in self.channel_mult]

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def lambda_embedding(lam: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of the flow parameter (scaled to a 0-1000 range)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=lam.dtype, device=lam.device) / half)
    args = (lam * 1000.0)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Residual attention from grid positions (queries) to a token sequence."""

    def __init__(self, channels: int, context_dim: int, heads: int, zero_init: bool = False) -> None:
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        if zero_init:
            zero_module(self.to_out)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        b, c, t, f = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (b, t*f, c)

        def split(h: Tensor) -> Tensor:
            return h.view(b, -1, self.heads, c // self.heads).transpose(1, 2)

        attn = F.scaled_dot_product_attention(
            split(self.to_q(tokens)), split(self.to_k(context)), split(self.to_v(context))
        )
        out = self.to_out(attn.transpose(1, 2).reshape(b, t * f, c))
        return x + out.transpose(1, 2).reshape(b, c, t, f)


class EncoderPath(nn.Module):
    """Conv + cross-attention levels; returns the pre-downsampling feature of every level."""

    def __init__(self, config: MRCConfig, temb_dim: int) -> None:
        super().__init__()
        widths = config.widths
        self.conv_in = nn.Conv2d(config.latent_channels, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.attentions = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, ch in enumerate(widths):
            self.blocks.append(ResBlock(prev, ch, temb_dim))
            self.attentions.append(CrossAttention(ch, config.d_text, config.heads))
            last = i == len(widths) - 1
            self.downsamples.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

    def forward(self, x: Tensor, temb: Tensor, context: Tensor) -> list[Tensor]:
        features = []
        h = self.conv_in(x)
        for block, attention, down in zip(self.blocks, self.attentions, self.downsamples):
            h = attention(block(h, temb), context)
            features.append(h)
            h = down(h)
        return features


class ReferenceInjection(nn.Module):
    """Squeeze a reference feature to the fixed grid, resize to the decoder level, project.

    Every level goes through the grid, with or without the alignment conv, so
    inserting the conv later leaves the base model's function unchanged. The
    cost is resolution: levels wider than the grid (16 frequency rows at
    level 0 of the full latent against 6 grid columns) reach the decoder
    smoothed to grid resolution.
    """

    def __init__(self, channels: int, grid: tuple[int, int], use_alignment: bool) -> None:
        super().__init__()
        self.channels = channels
        self.grid = tuple(grid)
        self.proj = zero_module(nn.Conv2d(channels, channels, 1))
        self.align: Optional[nn.Conv2d] = None
        if use_alignment:
            self.enable_alignment()

    def enable_alignment(self) -> None:
        if self.align is not None:
            return
        # identity at insertion: the adapted model starts from the base model's output
        self.align = nn.Conv2d(self.channels, self.channels, 3, padding=1)
        nn.init.dirac_(self.align.weight)
        nn.init.zeros_(self.align.bias)
        self.align.to(self.proj.weight)

    def aligned(self, feature: Tensor) -> Tensor:
        if self.align is not None:
            feature = self.align(feature)
        return F.adaptive_avg_pool2d(feature, self.grid)

    def forward(self, feature: Tensor, size: tuple[int, int]) -> Tensor:
        grid = self.aligned(feature)
        return self.proj(F.interpolate(grid, size=size, mode="bilinear", align_corners=False))


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class DecoderLevel(nn.Module):
    def __init__(self, channels: int, config: MRCConfig, temb_dim: int) -> None:
        super().__init__()
        self.inject = ReferenceInjection(channels, config.align_grid, config.use_alignment)
        self.block = ResBlock(2 * channels, channels, temb_dim)
        self.prompt_attention = CrossAttention(channels, config.d_text, config.heads)
        self.reference_attention = CrossAttention(channels, config.d_text, config.heads, zero_init=True)

    def forward(self, x: Tensor, skip: Tensor, reference: Tensor, temb: Tensor,
                prompt: Tensor, reference_text: Tensor) -> Tensor:
        x = x + self.inject(reference, tuple(x.shape[-2:]))
        x = self.block(torch.cat([x, skip], dim=1), temb)
        x = self.prompt_attention(x, prompt)
        return self.reference_attention(x, reference_text)


class MRCUNet(nn.Module):
    def __init__(self, config: Optional[MRCConfig] = None) -> None:
        super().__init__()
        self.config = config or MRCConfig()
        widths = self.config.widths
        temb_dim = 4 * self.config.n_hidden
        self.lambda_mlp = nn.Sequential(
            nn.Linear(self.config.n_hidden, temb_dim),
            nn.SiLU(),
            nn.Linear(temb_dim, temb_dim),
        )
        self.feature_encoder = EncoderPath(self.config, temb_dim)
        self.reference_encoder = EncoderPath(self.config, temb_dim)
        self.mid_block = ResBlock(widths[-1], widths[-1], temb_dim)
        self.mid_attention = CrossAttention(widths[-1], self.config.d_text, self.config.heads)
        self.upsamples = nn.ModuleList(
            [Upsample(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]
        )
        self.decoder = nn.ModuleList([DecoderLevel(ch, self.config, temb_dim) for ch in widths])
        self.norm_out = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], self.config.latent_channels, 3, padding=1)

    def _check_inputs(self, z: Tensor, lam: Tensor, references: Tensor,
                      reference_text: Tensor, prompt: Tensor) -> None:
        cfg = self.config
        if z.ndim != 4 or z.shape[1] != cfg.latent_channels:
            raise RefAudioValueError(f"z must be (B, {cfg.latent_channels}, T, F), got {tuple(z.shape)}")
        b, _, t, f = z.shape
        if t % cfg.downsample_factor or f % cfg.downsample_factor:
            raise RefAudioValueError(f"latent grid {t}x{f} not divisible by {cfg.downsample_factor}")
        if lam.shape != (b,):
            raise RefAudioValueError(f"lambda must have shape ({b},), got {tuple(lam.shape)}")
        if references.ndim != 4 or references.shape[0] != b or references.shape[1] != cfg.latent_channels \
                or references.shape[3] != f or references.shape[2] % t:
            raise RefAudioValueError(
                f"references must be (B, C, K*{t}, {f}) matching z, got {tuple(references.shape)}"
            )
        for name, ctx in (("reference_text", reference_text), ("prompt", prompt)):
            if ctx.ndim != 3 or ctx.shape[0] != b or ctx.shape[2] != cfg.d_text:
                raise RefAudioValueError(f"{name} must be (B, L, {cfg.d_text}), got {tuple(ctx.shape)}")

    def embed_lambda(self, lam: Tensor) -> Tensor:
        return self.lambda_mlp(lambda_embedding(lam, self.config.n_hidden))

    def forward(self, z: Tensor, lam: Tensor, references: Tensor,
                reference_text: Tensor, prompt: Tensor) -> Tensor:
        lam = torch.as_tensor(lam, dtype=z.dtype, device=z.device)
        if lam.ndim == 0:
            lam = lam.expand(z.shape[0])
        self._check_inputs(z, lam, references, reference_text, prompt)
        temb = self.embed_lambda(lam)

        skips = self.feature_encoder(z, temb, prompt)
        reference_features = self.reference_encoder(references, temb, reference_text)

        h = self.mid_attention(self.mid_block(skips[-1], temb), prompt)
        for i in reversed(range(len(self.decoder))):
            if i < len(self.decoder) - 1:
                h = self.upsamples[i](h)
            h = self.decoder[i](h, skips[i], reference_features[i], temb, prompt, reference_text)
        return self.conv_out(F.silu(self.norm_out(h)))

    def aligned_reference_grids(self, references: Tensor, lam: Tensor,
                                reference_text: Tensor) -> list[Tensor]:
        """Per-level reference features squeezed onto the fixed alignment grid."""
        temb = self.embed_lambda(torch.as_tensor(lam, dtype=references.dtype).reshape(-1))
        features = self.reference_encoder(references, temb, reference_text)
        return [level.inject.aligned(feat) for level, feat in zip(self.decoder, features)]

    def enable_alignment(self) -> None:
        self.config = msgspec.structs.replace(self.config, use_alignment=True)
        for level in self.decoder:
            level.inject.enable_alignment()

    def alignment_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if ".inject.align." in name]
