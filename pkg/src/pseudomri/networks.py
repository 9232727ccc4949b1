"""KL autoencoder, condition encoder, conditional U-Net denoiser and KOA classifier stub."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .guidance import NUM_GRADES, AdaptiveWeight, GuidanceBundle, embed_depth, intensity_map, smoothed_one_hot

LOGVAR_RANGE = (-30.0, 20.0)


@dataclass
class AutoencoderConfig:
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    res_blocks_per_stage: int = 1
    latent_channels: int = 4
    input_resolution: int = 64
    image_channels: int = 1
    kl_weight: float = 1e-6
    norm_groups: int = 8

    def __post_init__(self):
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be nonempty")
        if self.input_resolution % self.downsample_factor:
            raise ValueError("input_resolution must be divisible by 2**(stages - 1)")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    @property
    def latent_resolution(self) -> int:
        return self.input_resolution // self.downsample_factor


@dataclass
class UNetConfig:
    in_channels: int = 8
    out_channels: int = 4
    base_channels: int = 64
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    res_blocks_per_stage: int = 1
    attention_resolutions: list[int] = field(default_factory=lambda: [2, 4])
    attention_heads: int = 4
    context_dim: int = 64
    depth_dim: int = 32
    guidance_attn_dim: int = 8
    norm_groups: int = 8

    def __post_init__(self):
        if self.in_channels != 2 * self.out_channels:
            raise ValueError("in_channels must be twice the latent channel count")


@dataclass
class ConditionEncoderConfig:
    base_channels: int = 16
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    res_blocks_per_stage: int = 1
    norm_groups: int = 8


@dataclass
class GaussianPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError("posterior mean/logvar shapes differ")
        self.logvar = self.logvar.clamp(*LOGVAR_RANGE)


def _groups(channels: int, preferred: int) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: Optional[int] = None, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention on the context tokens and a feed-forward layer (depth 1)."""

    def __init__(self, ch: int, heads: int, context_dim: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(ch), nn.LayerNorm(ch), nn.LayerNorm(ch)
        self.self_attn = nn.MultiheadAttention(ch, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(ch, heads, kdim=context_dim, vdim=context_dim, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context):
        b, c, hh, ww = x.shape
        h = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        q = self.ln1(h)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        ctx = context if context.ndim == 3 else context[:, None, :]
        h = h + self.cross_attn(self.ln2(h), ctx, ctx, need_weights=False)[0]
        h = h + self.ff(self.ln3(h))
        return x + self.proj_out(h.transpose(1, 2).reshape(b, c, hh, ww))


class Encoder(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, base: int, mults, n_res: int, groups: int = 8):
        super().__init__()
        self.conv_in = nn.Conv2d(in_ch, base, 3, padding=1)
        blocks = []
        ch = base
        for level, m in enumerate(mults):
            for _ in range(n_res):
                blocks.append(ResBlock(ch, base * m, groups=groups))
                ch = base * m
            if level != len(mults) - 1:
                blocks.append(Downsample(ch))
        self.blocks = nn.ModuleList(blocks)
        self.mid = ResBlock(ch, ch, groups=groups)
        self.norm_out = nn.GroupNorm(_groups(ch, groups), ch)
        self.conv_out = nn.Conv2d(ch, out_ch, 3, padding=1)
        self.out_features = ch

    def features(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        return F.silu(self.norm_out(self.mid(h)))

    def forward(self, x):
        return self.conv_out(self.features(x))


class Decoder(nn.Module):
    def __init__(self, latent_ch: int, out_ch: int, base: int, mults, n_res: int, groups: int = 8):
        super().__init__()
        ch = base * mults[-1]
        self.conv_in = nn.Conv2d(latent_ch, ch, 3, padding=1)
        self.mid = ResBlock(ch, ch, groups=groups)
        blocks = []
        for level in reversed(range(len(mults))):
            for _ in range(n_res):
                blocks.append(ResBlock(ch, base * mults[level], groups=groups))
                ch = base * mults[level]
            if level != 0:
                blocks.append(Upsample(ch))
        self.blocks = nn.ModuleList(blocks)
        self.norm_out = nn.GroupNorm(_groups(ch, groups), ch)
        self.conv_out = nn.Conv2d(ch, out_ch, 3, padding=1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for blk in self.blocks:
            h = blk(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class AutoencoderKL(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        args = (cfg.base_channels, cfg.channel_multipliers, cfg.res_blocks_per_stage, cfg.norm_groups)
        self.encoder = Encoder(cfg.image_channels, 2 * cfg.latent_channels, *args)
        self.decoder = Decoder(cfg.latent_channels, cfg.image_channels, *args)

    def encode(self, x) -> GaussianPosterior:
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return GaussianPosterior(mean, logvar)

    def forward(self, x, generator=None):
        post = self.encode(x)
        z = post.mean + torch.exp(0.5 * post.logvar) * _randn_like(post.mean, generator)
        return self.decoder(z), post


def _randn_like(t: torch.Tensor, generator=None) -> torch.Tensor:
    return torch.randn(t.shape, generator=generator, dtype=t.dtype, device=t.device)


def _check_resolution(x: torch.Tensor, res: int, what: str) -> None:
    if x.shape[-2:] != (res, res):
        raise ValueError(f"{what} must be {res}x{res}, got {tuple(x.shape[-2:])}")


def encode_kl(x: torch.Tensor, model: AutoencoderKL) -> GaussianPosterior:
    _check_resolution(x, model.cfg.input_resolution, "input slice")
    return model.encode(x)


def sample_posterior(post: GaussianPosterior, generator=None, scale: float = 0.2) -> torch.Tensor:
    """Reparameterized draw from the posterior, multiplied by the latent scale factor."""
    return scale * (post.mean + torch.exp(0.5 * post.logvar) * _randn_like(post.mean, generator))


def decode(z: torch.Tensor, model: AutoencoderKL, scale: float = 0.2) -> torch.Tensor:
    """Decode a scaled latent back to an image in [-1, 1]."""
    _check_resolution(z, model.cfg.latent_resolution, "latent")
    return model.decoder(z / scale).clamp(-1.0, 1.0)


def kl_to_standard_normal(post: GaussianPosterior) -> torch.Tensor:
    return torch.mean(0.5 * (post.mean**2 + torch.exp(post.logvar) - 1.0 - post.logvar))


def recon_kl_loss(x, x_hat, post: GaussianPosterior, kl_weight: float):
    """MSE reconstruction plus weighted per-element-mean KL; returns ``(total, mse, kl)``."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = torch.mean((x - x_hat) ** 2)
    kl = kl_to_standard_normal(post)
    return mse + kl_weight * kl, mse, kl


class ConditionEncoder(nn.Module):
    """Maps the radiograph to a latent-resolution condition map and a pooled context vector."""

    def __init__(self, cfg: ConditionEncoderConfig, ae_cfg: AutoencoderConfig, context_dim: int):
        super().__init__()
        if len(cfg.channel_multipliers) != len(ae_cfg.channel_multipliers):
            raise ValueError("condition encoder must downsample to the latent resolution")
        self.input_resolution = ae_cfg.input_resolution
        self.body = Encoder(ae_cfg.image_channels, ae_cfg.latent_channels, cfg.base_channels,
                            cfg.channel_multipliers, cfg.res_blocks_per_stage, cfg.norm_groups)
        self.context = nn.Linear(self.body.out_features, context_dim)

    def forward(self, x):
        feats = self.body.features(x)
        return self.body.conv_out(feats), self.context(feats.mean(dim=(-2, -1)))


def encode_condition(x_c: torch.Tensor, model: ConditionEncoder):
    _check_resolution(x_c, model.input_resolution, "condition image")
    return model(x_c)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class UNet(nn.Module):
    """Conditional denoiser.

    Time + depth embeddings condition the downsampling path, the time embedding alone the
    middle and upsampling paths, and the adaptive-weight map is added at each upsampling
    stage through a per-stage 1x1 projection.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        base, mults, g = cfg.base_channels, cfg.channel_multipliers, cfg.norm_groups
        emb = 4 * base
        self.time_mlp = nn.Sequential(nn.Linear(base, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.depth_mlp = nn.Sequential(nn.Linear(cfg.depth_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        def attn(ch, level):
            if 2**level in cfg.attention_resolutions:
                return SpatialTransformer(ch, cfg.attention_heads, cfg.context_dim, g)
            return None

        self.down = nn.ModuleList()
        skip_ch = [base]
        ch = base
        for level, m in enumerate(mults):
            for _ in range(cfg.res_blocks_per_stage):
                self.down.append(nn.ModuleList([ResBlock(ch, base * m, emb, g), attn(base * m, level) or nn.Identity()]))
                ch = base * m
                skip_ch.append(ch)
            if level != len(mults) - 1:
                self.down.append(nn.ModuleList([Downsample(ch)]))
                skip_ch.append(ch)

        self.mid1 = ResBlock(ch, ch, emb, g)
        self.mid_attn = SpatialTransformer(ch, cfg.attention_heads, cfg.context_dim, g)
        self.mid2 = ResBlock(ch, ch, emb, g)

        self.up = nn.ModuleList()
        self.guide = nn.ModuleList()
        for level in reversed(range(len(mults))):
            self.guide.append(nn.Conv2d(1, ch, 1))
            for _ in range(cfg.res_blocks_per_stage + 1):
                out = base * mults[level]
                self.up.append(nn.ModuleList([ResBlock(ch + skip_ch.pop(), out, emb, g), attn(out, level) or nn.Identity()]))
                ch = out
            if level != 0:
                self.up.append(nn.ModuleList([Upsample(ch)]))
        assert not skip_ch, "unpaired skip connections"

        self.norm_out = nn.GroupNorm(_groups(ch, g), ch)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)

    @staticmethod
    def _run_pair(pair, h, emb, context):
        h = pair[0](h, emb)
        if isinstance(pair[1], SpatialTransformer):
            h = pair[1](h, context)
        return h

    def forward(self, z_concat, t, depth, y_combined, context):
        b = z_concat.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        depth = torch.as_tensor(depth, dtype=z_concat.dtype).reshape(-1)
        t, depth = t.expand(b) if t.numel() == 1 else t, depth.expand(b) if depth.numel() == 1 else depth
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(z_concat.dtype))
        down_emb = t_emb + self.depth_mlp(embed_depth(depth, self.cfg.depth_dim))

        h = self.conv_in(z_concat)
        skips = [h]
        for pair in self.down:
            h = pair[0](h) if len(pair) == 1 else self._run_pair(pair, h, down_emb, context)
            skips.append(h)

        h = self.mid2(self.mid_attn(self.mid1(h, t_emb), context), t_emb)

        # the guidance plane is the latent plane, so feature maps are never larger than it
        y = y_combined[:, None] if y_combined.ndim == 3 else y_combined
        guides = iter(self.guide)
        h = h + next(guides)(F.adaptive_avg_pool2d(y, h.shape[-2:]))
        for pair in self.up:
            if len(pair) == 1:
                h = pair[0](h)
                h = h + next(guides)(F.adaptive_avg_pool2d(y, h.shape[-2:]))
            else:
                h = self._run_pair(pair, torch.cat([h, skips.pop()], dim=1), t_emb, context)
        return self.conv_out(F.silu(self.norm_out(h)))


class KoaClassifier(nn.Module):
    """Small convolutional stand-in for the pre-trained KOA grade classifier."""

    def __init__(self, image_channels: int = 1, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(image_channels, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(), nn.Linear(32 * width, NUM_GRADES),
        )

    def forward(self, x):
        return self.net(x)


def koa_classify_stub(x_c: torch.Tensor, model: Optional[KoaClassifier] = None, grade=None,
                      smoothing: float = 0.1) -> torch.Tensor:
    """Grade distribution for ``x_c``; with ``grade`` given the classifier is bypassed."""
    if grade is not None:
        return smoothed_one_hot(grade, smoothing, dtype=x_c.dtype)
    if model is None:
        raise ValueError("classifier mode needs a model")
    return torch.softmax(model(x_c), dim=-1)


class Denoiser(nn.Module):
    """Everything trained in the diffusion stage: condition encoder, guidance module and U-Net."""

    def __init__(self, ae_cfg: AutoencoderConfig, unet_cfg: UNetConfig, cond_cfg: ConditionEncoderConfig):
        super().__init__()
        if unet_cfg.out_channels != ae_cfg.latent_channels:
            raise ValueError("U-Net output channels must equal the latent channel count")
        res = ae_cfg.latent_resolution
        self.cond_encoder = ConditionEncoder(cond_cfg, ae_cfg, unet_cfg.context_dim)
        self.guidance = AdaptiveWeight(res, res, unet_cfg.guidance_attn_dim)
        self.unet = UNet(unet_cfg)

    def condition(self, x_c: torch.Tensor, probs: torch.Tensor):
        """Depth-independent conditioning: ``(cond_latent, context, guidance bundle)``."""
        cond_latent, context = encode_condition(x_c, self.cond_encoder)
        i_map = intensity_map(x_c[:, 0], self.guidance.h, self.guidance.w)
        return cond_latent, context, self.guidance(probs, i_map)

    def forward(self, z_t, t, depth, cond):
        cond_latent, context, guide = cond
        return unet_denoise(torch.cat([z_t, cond_latent], dim=1), t, depth, guide, context, self.unet)


def unet_denoise(z_concat, t, depth, guidance: GuidanceBundle, context, model: UNet):
    cfg = model.cfg
    if z_concat.shape[1] != cfg.in_channels:
        raise ValueError(f"U-Net expects {cfg.in_channels} input channels, got {z_concat.shape[1]}")
    return model(z_concat, t, depth, guidance.y_combined, context)
