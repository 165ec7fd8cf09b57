"""Encoder and decoder building blocks.

Every residual block exposes ``zero_init`` which zeroes the projection that
closes each residual branch, turning the block into the identity map.
Each module also reports an exact ``macs(n, h, w)`` matching what the
instrumented primitives record during ``forward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError
from .nn import Conv2d, LayerNorm, Module
from .tensor import matmul, swap_last


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    ffn_expand: int = 4
    attn_heads: int = 1
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.ffn_expand < 1 or self.attn_heads < 1:
            raise ConfigError("block sizes must be positive")
        if self.channels % self.attn_heads:
            raise ConfigError(f"channels={self.channels} not divisible by attn_heads={self.attn_heads}")


class FFN(Module):
    def __init__(self, cfg: BlockConfig, rng, zero_init=False):
        c, hidden = cfg.channels, cfg.channels * cfg.ffn_expand
        self.norm = LayerNorm(c, cfg.norm_eps)
        self.expand = Conv2d(c, hidden, 1, rng=rng)
        self.contract = Conv2d(hidden, c, 1, rng=rng, init="zero" if zero_init else "kaiming")

    def forward(self, x):
        return x + self.contract(F.gelu(self.expand(self.norm(x))))

    def macs(self, n, h, w):
        e = n * self.norm.channels * h * w
        hidden = self.expand.c_out
        return e + self.expand.macs(n, h, w) + n * hidden * h * w + self.contract.macs(n, h, w) + e


# ---------------------------------------------------------------------------
# large kernel attention

class LKAAttention(Module):
    """``attn = P(DWD7_d3(DW5(x)))``; returns ``attn * x``."""

    def __init__(self, channels, rng):
        c = channels
        self.dw = Conv2d(c, c, 5, groups=c, rng=rng)
        self.dwd = Conv2d(c, c, 7, dilation=3, groups=c, rng=rng)
        self.pw = Conv2d(c, c, 1, rng=rng)

    def forward(self, x):
        return self.pw(self.dwd(self.dw(x))) * x

    def macs(self, n, h, w):
        return (self.dw.macs(n, h, w) + self.dwd.macs(n, h, w) + self.pw.macs(n, h, w)
                + n * self.pw.c_out * h * w)


def lka_attention(x, p: LKAAttention):
    return p(x)


class LKABlock(Module):
    def __init__(self, cfg: BlockConfig, rng=None, zero_init=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = cfg.channels
        self.cfg = cfg
        self.norm = LayerNorm(c, cfg.norm_eps)
        self.proj_in = Conv2d(c, c, 1, rng=rng)
        self.lka = LKAAttention(c, rng)
        self.proj_out = Conv2d(c, c, 1, rng=rng, init="zero" if zero_init else "kaiming")
        self.ffn = FFN(cfg, rng, zero_init)

    def forward(self, x):
        x = x + self.proj_out(self.lka(F.gelu(self.proj_in(self.norm(x)))))
        return self.ffn(x)

    def macs(self, n, h, w):
        e = n * self.cfg.channels * h * w
        return (e + self.proj_in.macs(n, h, w) + e + self.lka.macs(n, h, w)
                + self.proj_out.macs(n, h, w) + e + self.ffn.macs(n, h, w))


# ---------------------------------------------------------------------------
# dual attention (efficient + channel)

def _heads(x, heads):
    n, c, h, w = x.shape
    return x.reshape(n, heads, c // heads, h * w)


class EfficientAttention(Module):
    """Token-linear attention ``softmax_d(Q) (softmax_n(K)^T V)``.

    Works in the channel-major view ``[N, heads, d, n]``; the token view of the
    literature is its transpose, so no data is permuted.
    """

    def __init__(self, channels, heads=1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        self.q = Conv2d(channels, channels, 1, rng=rng)
        self.k = Conv2d(channels, channels, 1, rng=rng)
        self.v = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x):
        return efficient_attention(self.q(x), self.k(x), self.v(x), self.heads)

    def macs(self, n, h, w):
        c = self.q.c_out
        dh, t, e = c // self.heads, h * w, n * c * h * w
        return (3 * self.q.macs(n, h, w) + 2 * e
                + 2 * n * self.heads * dh * t * dh)


def efficient_attention(q, k, v, heads=1):
    """Channel-view inputs ``[N, C, H, W]`` already projected; returns same shape."""
    shape = q.shape
    qs = F.softmax(_heads(q, heads), axis=2)   # over features
    ks = F.softmax(_heads(k, heads), axis=3)   # over tokens
    ctx = matmul(ks, swap_last(_heads(v, heads)))   # [N, h, d_k, d_v]
    out = matmul(swap_last(ctx), qs)
    return out.reshape(shape)


class ChannelAttention(Module):
    """Transposed attention: ``A = softmax_rows(K^T Q / sqrt(n))``, ``out = V A``."""

    def __init__(self, channels, heads=1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        self.q = Conv2d(channels, channels, 1, rng=rng)
        self.k = Conv2d(channels, channels, 1, rng=rng)
        self.v = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x, return_map=False):
        return channel_attention(self.q(x), self.k(x), self.v(x), self.heads, return_map)

    def macs(self, n, h, w):
        c = self.q.c_out
        dh, t = c // self.heads, h * w
        return (3 * self.q.macs(n, h, w) + 2 * n * self.heads * dh * t * dh
                + 2 * n * self.heads * dh * dh)


def channel_attention(q, k, v, heads=1, return_map=False):
    shape = q.shape
    tokens = shape[2] * shape[3]
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    a = F.softmax(matmul(kh, swap_last(qh)) * (1.0 / math.sqrt(tokens)), axis=-1)
    out = matmul(swap_last(a), vh).reshape(shape)
    return (out, a) if return_map else out


class DAEBlock(Module):
    """Two pre-norm residual attention sublayers, each followed by a residual FFN."""

    def __init__(self, cfg: BlockConfig, rng=None, zero_init=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = cfg.channels
        self.cfg = cfg
        z = "zero" if zero_init else "kaiming"
        self.norm1 = LayerNorm(c, cfg.norm_eps)
        self.eff_attn = EfficientAttention(c, cfg.attn_heads, rng)
        self.eff_out = Conv2d(c, c, 1, rng=rng, init=z)
        self.ffn1 = FFN(cfg, rng, zero_init)
        self.norm2 = LayerNorm(c, cfg.norm_eps)
        self.chan_attn = ChannelAttention(c, cfg.attn_heads, rng)
        self.chan_out = Conv2d(c, c, 1, rng=rng, init=z)
        self.ffn2 = FFN(cfg, rng, zero_init)

    def forward(self, x):
        x = x + self.eff_out(self.eff_attn(self.norm1(x)))
        x = self.ffn1(x)
        x = x + self.chan_out(self.chan_attn(self.norm2(x)))
        return self.ffn2(x)

    def macs(self, n, h, w):
        e = n * self.cfg.channels * h * w
        return (e + self.eff_attn.macs(n, h, w) + self.eff_out.macs(n, h, w) + e
                + self.ffn1.macs(n, h, w)
                + e + self.chan_attn.macs(n, h, w) + self.chan_out.macs(n, h, w) + e
                + self.ffn2.macs(n, h, w))


# ---------------------------------------------------------------------------
# encoder and scale transitions

class MBConv(Module):
    """Pre-norm inverted bottleneck: 1x1 expand, depthwise 3x3 (stride 1|2), 1x1 contract.

    The residual is kept only when the output shape equals the input shape.
    """

    def __init__(self, c_in, c_out=None, stride=1, expand=4, rng=None, zero_init=False, eps=1e-5):
        rng = rng if rng is not None else np.random.default_rng(0)
        c_out = c_in if c_out is None else c_out
        if stride not in (1, 2):
            raise ConfigError("MBConv stride must be 1 or 2")
        hidden = c_in * expand
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.norm = LayerNorm(c_in, eps)
        self.expand = Conv2d(c_in, hidden, 1, rng=rng)
        self.dw = Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, rng=rng)
        self.contract = Conv2d(hidden, c_out, 1, rng=rng, init="zero" if zero_init else "kaiming")

    @property
    def residual(self):
        return self.stride == 1 and self.c_in == self.c_out

    def forward(self, x):
        y = self.contract(F.gelu(self.dw(F.gelu(self.expand(self.norm(x))))))
        return x + y if self.residual else y

    def macs(self, n, h, w):
        e = n * self.c_in * h * w
        ho, wo = self.dw.out_size(h), self.dw.out_size(w)
        hidden = self.expand.c_out
        total = (e + self.expand.macs(n, h, w) + n * hidden * h * w + self.dw.macs(n, h, w)
                 + n * hidden * ho * wo + self.contract.macs(n, ho, wo))
        if self.residual:
            total += n * self.c_out * ho * wo
        return total


class ChannelProject(Module):
    def __init__(self, c_in, c_out, rng=None):
        self.proj = Conv2d(c_in, c_out, 1, rng=rng)

    def forward(self, x):
        return self.proj(x)

    def macs(self, n, h, w):
        return self.proj.macs(n, h, w)


def channel_project(x, p: ChannelProject):
    return p(x)


class PatchExpand(Module):
    """Bilinear x2 upsample, then 1x1 projection to half the channels."""

    def __init__(self, c_in, c_out=None, rng=None):
        self.c_in = c_in
        self.project = ChannelProject(c_in, c_in // 2 if c_out is None else c_out, rng)

    def forward(self, x):
        return self.project(F.upsample_bilinear(x, 2))

    def macs(self, n, h, w):
        return n * self.c_in * 4 * h * w + self.project.macs(n, 2 * h, 2 * w)


def patch_expand(x, p: PatchExpand):
    return p(x)
