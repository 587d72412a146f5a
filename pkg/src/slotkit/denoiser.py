"""Slot-conditioned U-Net noise predictor.

The network takes a noisy latent grid, a timestep, and a set of slot
vectors. Timesteps enter through a sinusoidal embedding added inside every
residual block; slots enter through cross-attention (queries from feature
map tokens, keys/values from slots) at the configured levels, alongside
global self-attention. Cross-attention output is invariant to slot order,
and with an empty or all-zero slot set the conditioning path vanishes,
leaving an unconditional denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as tt
from .rng import Rng
from .tensor import ContractError, DimensionError, Tensor


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Raw interleaved sin/cos embedding of integer timesteps.

    Frequencies are geometrically spaced from 1 down to 1e-4; even columns
    carry sin, odd columns cos. Returns (len(t), dim) in the default dtype.
    """
    if dim % 2:
        raise ContractError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t)).astype(np.float64)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out.astype(tt.default_dtype())


@dataclass(frozen=True)
class UNetConfig:
    """Denoiser shape: one channel multiplier per level (finest first);
    `attn_levels` lists the level indices that get self+cross attention."""

    in_channels: int = 3
    base_width: int = 64
    channel_mults: tuple = (1, 2, 2)
    attn_levels: tuple = (1, 2)
    time_dim: int = 128
    heads: int = 4
    d_cond: int = 192
    groups: int = 8

    def widths(self):
        return [self.base_width * m for m in self.channel_mults]

    def validate(self):
        levels = range(len(self.channel_mults))
        if not set(self.attn_levels) <= set(levels):
            raise ContractError(
                f"attn_levels {self.attn_levels} outside levels {list(levels)}")
        for w in self.widths():
            if w <= 0 or w % self.groups:
                raise ContractError(f"width {w} incompatible with {self.groups} groups")
            if w % self.heads:
                raise ContractError(f"width {w} not divisible by {self.heads} heads")
        if self.time_dim % 2:
            raise ContractError("time_dim must be even")


class TimeEmbedding(nn.Module):
    def __init__(self, dim, rng: Rng):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim, rng.stream(0))
        self.fc2 = nn.Linear(dim, dim, rng.stream(1))

    def __call__(self, t) -> Tensor:
        h = Tensor(timestep_embedding(t, self.dim))
        return self.fc2(tt.silu(self.fc1(h)))


class CrossAttention(nn.Module):
    """Scaled dot-product attention from map tokens onto slots, residual.

    cmap (B, M, C) x slots (B, N, d_cond) -> (B, M, C). Invariant to slot
    permutation; with N == 0 the map passes through unchanged.
    """

    def __init__(self, channels, d_cond, heads, rng: Rng):
        super().__init__()
        self.heads = heads
        self.channels = channels
        self.norm_q = nn.LayerNorm(channels)
        self.norm_c = nn.LayerNorm(d_cond)
        self.proj_q = nn.Linear(channels, channels, rng.stream(0), bias=False)
        self.proj_k = nn.Linear(d_cond, channels, rng.stream(1), bias=False)
        self.proj_v = nn.Linear(d_cond, channels, rng.stream(2), bias=False)
        self.proj_out = nn.Linear(channels, channels, rng.stream(3), bias=False)

    def _heads(self, x):
        b, m, c = x.shape
        return tt.transpose(x.reshape(b, m, self.heads, c // self.heads), (0, 2, 1, 3))

    def __call__(self, cmap, slots):
        if slots is None or slots.shape[1] == 0:
            return cmap
        q = self._heads(self.proj_q(self.norm_q(cmap)))
        cond = self.norm_c(slots)
        k = self._heads(self.proj_k(cond))
        v = self._heads(self.proj_v(cond))
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = tt.softmax(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        ctx = tt.matmul(attn, v)
        b, h, m, dh = ctx.shape
        ctx = tt.transpose(ctx, (0, 2, 1, 3)).reshape(b, m, h * dh)
        return cmap + self.proj_out(ctx)


class SelfAttention(nn.Module):
    """Global self-attention over map tokens, residual."""

    def __init__(self, channels, heads, rng: Rng):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.proj_qkv = nn.Linear(channels, 3 * channels, rng.stream(0), bias=False)
        self.proj_out = nn.Linear(channels, channels, rng.stream(1), bias=False)

    def __call__(self, cmap):
        b, m, c = cmap.shape
        h = self.heads
        qkv = self.proj_qkv(self.norm(cmap))
        q, k, v = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
        split = lambda x: tt.transpose(x.reshape(b, m, h, c // h), (0, 2, 1, 3))
        q, k, v = split(q), split(k), split(v)
        attn = tt.softmax(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(c // h)),
                          axis=-1)
        ctx = tt.matmul(attn, v)
        ctx = tt.transpose(ctx, (0, 2, 1, 3)).reshape(b, m, c)
        return cmap + self.proj_out(ctx)


class ResBlock(nn.Module):
    """Norm-act-conv twice with the timestep embedding added in between."""

    def __init__(self, c_in, c_out, time_dim, groups, rng: Rng):
        super().__init__()
        self.gn1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng.stream(0), stride=1, pad=1)
        self.time_proj = nn.Linear(time_dim, c_out, rng.stream(1))
        self.gn2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng.stream(2), stride=1, pad=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng.stream(3)) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.conv1(tt.silu(self.gn1(x)))
        h = h + tt.silu(self.time_proj(temb)).reshape(temb.shape[0], -1, 1, 1)
        h = self.conv2(tt.silu(self.gn2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class AttnPair(nn.Module):
    """Self-attention then cross-attention on the token view of a map."""

    def __init__(self, channels, d_cond, heads, rng: Rng):
        super().__init__()
        self.self_attn = SelfAttention(channels, heads, rng.stream(0))
        self.cross_attn = CrossAttention(channels, d_cond, heads, rng.stream(1))

    def __call__(self, x, slots):
        b, c, h, w = x.shape
        tokens = tt.transpose(x.reshape(b, c, h * w), (0, 2, 1))
        tokens = self.self_attn(tokens)
        tokens = self.cross_attn(tokens, slots)
        return tt.transpose(tokens, (0, 2, 1)).reshape(b, c, h, w)


class UNet(nn.Module):
    """Noise predictor eps(z_t, t, slots) with shape-preserving output."""

    def __init__(self, cfg: UNetConfig = UNetConfig(), rng: Rng | None = None):
        super().__init__()
        cfg.validate()
        rng = rng or Rng(0)
        self.cfg = cfg
        widths = cfg.widths()
        levels = len(widths)
        self.time_embed = TimeEmbedding(cfg.time_dim, rng.stream(100))
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, rng.stream(101), stride=1, pad=1)

        enc, downs, dec, ups = [], [], [], []
        enc_attn, dec_attn = [], []
        skip_widths = []
        carry = widths[0]
        for i, w in enumerate(widths):
            enc.append(ResBlock(carry, w, cfg.time_dim, cfg.groups, rng.stream(200 + i)))
            enc_attn.append(AttnPair(w, cfg.d_cond, cfg.heads, rng.stream(300 + i))
                            if i in cfg.attn_levels else None)
            skip_widths.append(w)
            carry = w
            if i < levels - 1:
                downs.append(nn.Conv2d(w, w, 3, rng.stream(400 + i), stride=2, pad=1))
        self.mid = ResBlock(carry, carry, cfg.time_dim, cfg.groups, rng.stream(500))
        for i in reversed(range(levels)):
            w = widths[i]
            # decoder level i consumes encoder level i's output via concat
            if carry != w:
                raise ContractError("skip-connection audit failed: carried width "
                                    f"{carry} != encoder level {i} width {w}")
            dec.append(ResBlock(w + skip_widths[i], w, cfg.time_dim, cfg.groups,
                                rng.stream(600 + i)))
            dec_attn.append(AttnPair(w, cfg.d_cond, cfg.heads, rng.stream(700 + i))
                            if i in cfg.attn_levels else None)
            if i > 0:
                ups.append(nn.ConvTranspose2d(w, widths[i - 1], 4, rng.stream(800 + i),
                                              stride=2, pad=1))
                carry = widths[i - 1]
        self.enc = nn.ModuleList(enc)
        self.enc_attn = nn.ModuleList([m for m in enc_attn if m is not None])
        self._enc_attn_map = [m is not None for m in enc_attn]
        self.downs = nn.ModuleList(downs)
        self.dec = nn.ModuleList(dec)
        self.dec_attn = nn.ModuleList([m for m in dec_attn if m is not None])
        self._dec_attn_map = [m is not None for m in dec_attn]
        self.ups = nn.ModuleList(ups)
        self.out_norm = nn.GroupNorm(cfg.groups, widths[0])
        self.head = nn.Conv2d(widths[0], cfg.in_channels, 3, rng.stream(900),
                              stride=1, pad=1, zero_init=True)

    def __call__(self, zt, t, slots=None) -> Tensor:
        zt = zt if isinstance(zt, Tensor) else Tensor(zt)
        if zt.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"latent has {zt.shape[1]} channels, config wants {self.cfg.in_channels}")
        down_factor = 2 ** (len(self.cfg.channel_mults) - 1)
        if zt.shape[2] % down_factor or zt.shape[3] % down_factor:
            raise DimensionError(
                f"latent extents {zt.shape[2:]} not divisible by {down_factor}")
        temb = self.time_embed(t)
        h = self.stem(zt)
        skips = []
        ai = 0
        for i, block in enumerate(self.enc):
            h = block(h, temb)
            if self._enc_attn_map[i]:
                h = self.enc_attn[ai](h, slots)
                ai += 1
            skips.append(h)
            if i < len(self.enc) - 1:
                h = self.downs[i](h)
        h = self.mid(h, temb)
        ai = 0
        for j, block in enumerate(self.dec):
            i = len(self.enc) - 1 - j
            h = block(tt.concat([h, skips[i]], axis=1), temb)
            if self._dec_attn_map[j]:
                h = self.dec_attn[ai](h, slots)
                ai += 1
            if i > 0:
                h = self.ups[j](h)
        return self.head(tt.silu(self.out_norm(h)))
