"""Denoising U-Net whose residual blocks are modulated by audio and noise-level embeddings.

Each residual block computes

    h' = z_s * (t_s * GN(h + t_b)) + z_b

where (z_s, z_b) come from the audio-window embedding and (t_s, t_b) from the
noise-level embedding, each through the block's own linear projection of a
shared trunk embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class UNetConfig:
    image_size: int = 128
    in_channels: int = 9
    out_channels: int = 3
    inner_channels: int = 64
    channel_multiples: tuple = (1, 2, 3)
    res_blocks_per_stage: int = 2
    attention_resolutions: tuple = (32,)
    head_channels: int = 32
    dropout: float = 0.2
    audio_window_shape: tuple = (5, 256)

    def __post_init__(self):
        self.channel_multiples = tuple(int(m) for m in self.channel_multiples)
        self.attention_resolutions = tuple(sorted(int(r) for r in self.attention_resolutions))
        self.audio_window_shape = tuple(int(v) for v in self.audio_window_shape)
        if not self.channel_multiples or any(b < a for a, b in zip(self.channel_multiples, self.channel_multiples[1:])):
            raise ValueError(f"channel_multiples must be non-empty and non-decreasing: {self.channel_multiples}")
        for r in self.attention_resolutions:
            if r > self.image_size or r & (r - 1):
                raise ValueError(f"attention resolution {r} must be a power of two <= image_size")
        if self.in_channels not in (9, 10):
            raise ValueError(f"in_channels must be 9 or 10, got {self.in_channels}")
        if self.image_size % 2 ** (len(self.channel_multiples) - 1):
            raise ValueError("image_size must be divisible by 2**(levels-1)")

    @property
    def embed_dim(self) -> int:
        return 4 * self.inner_channels

    @property
    def include_mask_channel(self) -> bool:
        return self.in_channels == 10

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)

    @classmethod
    def single_speaker(cls, image_size: int = 128, **kw) -> "UNetConfig":
        return cls(image_size=image_size, channel_multiples=(1, 2, 4, 8), attention_resolutions=(), **kw)

    @classmethod
    def multi_speaker(cls, image_size: int = 128, **kw) -> "UNetConfig":
        return cls(image_size=image_size, channel_multiples=(1, 2, 3), attention_resolutions=(32,), **kw)


def group_count(channels: int) -> int:
    return math.gcd(32, channels) if channels < 32 or channels % 32 else 32


def normalization(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(group_count(channels), channels)


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _mlp(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out), nn.SiLU(), nn.Linear(d_out, d_out))


class NoiseLevelEmbedding(nn.Module):
    """sqrt(alpha_bar) -> sinusoidal features (position scaled by 1000) -> two-layer MLP."""

    scale = 1000.0

    def __init__(self, inner_channels: int, embed_dim: int):
        super().__init__()
        self.inner_channels = inner_channels
        self.mlp = _mlp(inner_channels, embed_dim)

    def forward(self, alpha_bar: torch.Tensor) -> torch.Tensor:
        if bool(((alpha_bar <= 0) | (alpha_bar >= 1)).any()):
            raise ValueError("alpha_bar must lie strictly inside (0, 1)")
        pos = torch.sqrt(alpha_bar) * self.scale
        return self.mlp(sinusoidal_embedding(pos, self.inner_channels))


class AudioEmbedding(nn.Module):
    """Flattened [5, 256] mel window -> two-layer MLP."""

    def __init__(self, window_shape: tuple, embed_dim: int):
        super().__init__()
        self.window_shape = tuple(window_shape)
        self.mlp = _mlp(math.prod(window_shape), embed_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.window_shape:
            raise ValueError(f"audio window must be [B, {self.window_shape[0]}, {self.window_shape[1]}], got {tuple(z.shape)}")
        return self.mlp(z.flatten(1))


def film(h: torch.Tensor, z_s, z_b, t_s, t_b, norm: nn.Module) -> torch.Tensor:
    """z_s * (t_s * GN(h + t_b)) + z_b with per-channel [B, C] modulation vectors."""
    C = h.shape[1]
    for name, v in (("z_s", z_s), ("z_b", z_b), ("t_s", t_s), ("t_b", t_b)):
        if v.shape[-1] != C:
            raise ValueError(f"{name} has {v.shape[-1]} channels, feature map has {C}")
    e = (...,) + (None,) * (h.ndim - 2)
    return z_s[e] * (t_s[e] * norm(h + t_b[e])) + z_b[e]


class FiLMProjection(nn.Module):
    """Linear map of a trunk embedding to (scale, bias); scale starts near 1."""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.linear = nn.Linear(embed_dim, 2 * channels)
        with torch.no_grad():
            self.linear.bias[:channels].add_(1.0)

    def forward(self, emb: torch.Tensor):
        scale, bias = self.linear(F.silu(emb)).chunk(2, dim=-1)
        return scale, bias


class FiLMResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int, dropout: float):
        super().__init__()
        self.in_layers = nn.Sequential(normalization(in_ch), nn.SiLU(), nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.noise_proj = FiLMProjection(embed_dim, out_ch)
        self.audio_proj = FiLMProjection(embed_dim, out_ch)
        self.norm = normalization(out_ch)
        self.out_layers = nn.Sequential(nn.SiLU(), nn.Dropout(dropout), nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, t_emb, z_emb):
        h = self.in_layers(x)
        t_s, t_b = self.noise_proj(t_emb)
        z_s, z_b = self.audio_proj(z_emb)
        h = film(h, z_s, z_b, t_s, t_b, self.norm)
        return self.skip(x) + self.out_layers(h)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, head_channels: int):
        super().__init__()
        self.heads = max(1, channels // head_channels)
        self.norm = normalization(channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = nn.Conv1d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, *_):
        B, C, H, W = x.shape
        qkv = self.qkv(self.norm(x).reshape(B, C, H * W))
        q, k, v = qkv.reshape(B, 3, self.heads, C // self.heads, H * W).transpose(-1, -2).unbind(1)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(-1, -2).reshape(B, C, H * W)
        return x + self.proj(out).reshape(B, C, H, W)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x, *_):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, *_):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Stage(nn.Sequential):
    """Sequence of layers that all receive the trunk embeddings."""

    def forward(self, x, t_emb, z_emb):
        for layer in self:
            x = layer(x, t_emb, z_emb)
        return x


class _InputConv(nn.Conv2d):
    def forward(self, x, *_):
        return super().forward(x)


class ConditionedUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = cfg = config
        E = cfg.embed_dim
        self.noise_embed = NoiseLevelEmbedding(cfg.inner_channels, E)
        self.audio_embed = AudioEmbedding(cfg.audio_window_shape, E)

        ch = cfg.inner_channels * cfg.channel_multiples[0]
        self.input_blocks = nn.ModuleList([Stage(_InputConv(cfg.in_channels, ch, 3, padding=1))])
        skip_channels = [ch]
        res = cfg.image_size
        for level, mult in enumerate(cfg.channel_multiples):
            for _ in range(cfg.res_blocks_per_stage):
                layers = [FiLMResBlock(ch, cfg.inner_channels * mult, E, cfg.dropout)]
                ch = cfg.inner_channels * mult
                if res in cfg.attention_resolutions:
                    layers.append(AttentionBlock(ch, cfg.head_channels))
                self.input_blocks.append(Stage(*layers))
                skip_channels.append(ch)
            if level != len(cfg.channel_multiples) - 1:
                self.input_blocks.append(Stage(Downsample(ch)))
                skip_channels.append(ch)
                res //= 2

        self.middle_block = Stage(
            FiLMResBlock(ch, ch, E, cfg.dropout),
            AttentionBlock(ch, cfg.head_channels),
            FiLMResBlock(ch, ch, E, cfg.dropout),
        )

        self.output_blocks = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_multiples))):
            for i in range(cfg.res_blocks_per_stage + 1):
                layers = [FiLMResBlock(ch + skip_channels.pop(), cfg.inner_channels * mult, E, cfg.dropout)]
                ch = cfg.inner_channels * mult
                if res in cfg.attention_resolutions:
                    layers.append(AttentionBlock(ch, cfg.head_channels))
                if level and i == cfg.res_blocks_per_stage:
                    layers.append(Upsample(ch))
                    res *= 2
                self.output_blocks.append(Stage(*layers))

        self.out = nn.Sequential(normalization(ch), nn.SiLU(), nn.Conv2d(ch, cfg.out_channels, 3, padding=1))
        # small rather than zero: a zero head would cut every input, audio included, out of the initial gradient
        with torch.no_grad():
            self.out[-1].weight.mul_(0.1)
            self.out[-1].bias.zero_()

    def forward(self, x: torch.Tensor, audio: torch.Tensor, alpha_bar) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[-2:]) != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"input must be [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], got {tuple(x.shape)}"
            )
        if audio.shape[0] != x.shape[0]:
            raise ValueError("audio batch size differs from image batch size")
        alpha_bar = torch.as_tensor(alpha_bar, dtype=x.dtype, device=x.device)
        if alpha_bar.ndim == 0:
            alpha_bar = alpha_bar.expand(x.shape[0])
        t_emb = self.noise_embed(alpha_bar)
        z_emb = self.audio_embed(audio.to(x.dtype))

        skips = []
        h = x
        for block in self.input_blocks:
            h = block(h, t_emb, z_emb)
            skips.append(h)
        h = self.middle_block(h, t_emb, z_emb)
        for block in self.output_blocks:
            h = block(torch.cat([h, skips.pop()], dim=1), t_emb, z_emb)
        return self.out(h)


def build_model(config: UNetConfig) -> ConditionedUNet:
    return ConditionedUNet(config)


def predict_noise(model: ConditionedUNet, cond_input: torch.Tensor, z: torch.Tensor, alpha_bar) -> torch.Tensor:
    """Predicted noise [B, 3, S, S] for a (batched) conditioning stack and audio window."""
    if cond_input.ndim == 3:
        return model(cond_input[None], z[None] if z.ndim == 2 else z, alpha_bar)[0]
    return model(cond_input, z, alpha_bar)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
