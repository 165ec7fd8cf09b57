"""Multi-scale adaptive spatial attention gate.

The gate takes an encoder skip ``x`` and a decoder feature ``g`` of identical
shape and runs four stages:

    fuse            u  = P_l(DWD(DW(x))) + P_g([avg_C(g); max_C(g)])
    spatial_select  sw = softmax_C(P_s(u));  x' = sw0*x + x;  g' = sw1*g + g
    cross_modulate  x'' = x' * sig(g');  g'' = g' * sig(x');  u' = x'' * g''
    recalibrate     out = P_o(sig(P_r(u')) * x)

All ``P_*`` are 1x1 convolutions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError
from .nn import Conv2d, Module
from .tensor import Tensor, split

INIT_SCHEMES = ("zero-select", "kaiming")


@dataclass(frozen=True)
class MasagConfig:
    channels: int
    dw_kernel: int = 5
    dwd_kernel: int = 7
    dwd_dilation: int = 3
    init_scheme: str = "zero-select"

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        for k in (self.dw_kernel, self.dwd_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"gate kernels must be odd, got {k}")
        if self.dwd_dilation < 1:
            raise ConfigError("dwd_dilation must be >= 1")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}")

    def to_dict(self):
        return asdict(self)

    def param_count(self):
        c = self.channels
        return (c * self.dw_kernel ** 2 + c) + (c * self.dwd_kernel ** 2 + c) \
            + (c * c + c) + (2 * c + c) + (2 * c + 2) + 2 * (c * c + c)


@dataclass
class SelectionWeights:
    sw: Tensor

    @property
    def encoder(self):
        return self.sw.data[:, 0:1]

    @property
    def decoder(self):
        return self.sw.data[:, 1:2]


class MasagParams(Module):
    """The seven convolutions of one gate."""

    CONV_NAMES = ("local_dw", "local_dwd", "local_proj", "global_proj",
                  "select_proj", "recal_gate", "recal_out")

    def __init__(self, cfg: MasagConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = cfg.channels
        self.cfg = cfg
        self.local_dw = Conv2d(c, c, cfg.dw_kernel, groups=c, rng=rng)
        self.local_dwd = Conv2d(c, c, cfg.dwd_kernel, dilation=cfg.dwd_dilation, groups=c, rng=rng)
        self.local_proj = Conv2d(c, c, 1, rng=rng)
        self.global_proj = Conv2d(2, c, 1, rng=rng)
        self.select_proj = Conv2d(c, 2, 1, rng=rng,
                                  init="zero" if cfg.init_scheme == "zero-select" else "kaiming")
        self.recal_gate = Conv2d(c, c, 1, rng=rng)
        self.recal_out = Conv2d(c, c, 1, rng=rng)

    def forward(self, x, g):
        return masag_forward(x, g, self)

    def macs(self, n, h, w):
        """Exact MAC count of one ``masag_forward`` call on ``[n, C, h, w]``."""
        c = self.cfg.channels
        e = n * c * h * w
        convs = sum(getattr(self, name).macs(n, h, w) for name in self.CONV_NAMES)
        pool = 2 * e
        fuse_add = e
        select = n * 2 * h * w + 4 * e       # softmax, 2 muls, 2 adds
        cross = 2 * e + 3 * e                # 2 sigmoids, 3 muls
        recal = e + e                        # sigmoid, mul
        return convs + pool + fuse_add + select + cross + recal


def _check_pair(x, g):
    if x.shape != g.shape:
        raise ContractError(f"gate inputs must share shape, got x{x.shape} vs g{g.shape}")
    if x.ndim != 4:
        raise ContractError(f"gate inputs must be [N,C,H,W], got {x.shape}")


def fuse(x, g, p: MasagParams):
    _check_pair(x, g)
    local = p.local_proj(p.local_dwd(p.local_dw(x)))
    glob = p.global_proj(F.channel_pool_concat(g))
    return local + glob


def spatial_select(u, x, g, p: MasagParams):
    _check_pair(x, g)
    _check_pair(u, x)
    sw = F.softmax_channels(p.select_proj(u))
    sw_x, sw_g = split(sw, (1, 1), axis=1)
    x1 = sw_x * x + x
    g1 = sw_g * g + g
    return x1, g1, SelectionWeights(sw)


def cross_modulate(x1, g1):
    _check_pair(x1, g1)
    x2 = x1 * F.sigmoid(g1)
    g2 = g1 * F.sigmoid(x1)
    return x2 * g2, x2, g2


def recalibrate(u1, x, p: MasagParams, return_map=False):
    _check_pair(u1, x)
    attn = F.sigmoid(p.recal_gate(u1))
    out = p.recal_out(attn * x)
    return (out, attn) if return_map else out


def masag_forward(x, g, p: MasagParams):
    u = fuse(x, g, p)
    x1, g1, _ = spatial_select(u, x, g, p)
    u1, _, _ = cross_modulate(x1, g1)
    return recalibrate(u1, x, p)

