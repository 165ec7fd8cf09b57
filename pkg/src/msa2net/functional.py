"""Differentiable primitives on ``[N, C, H, W]`` feature maps."""
from __future__ import annotations

import math

import numpy as np
from scipy import fft as sfft

from .errors import ConfigError, ContractError
from .tensor import Tensor, _node, as_tensor, record_macs


def same_padding(kernel, dilation=1):
    if kernel % 2 == 0:
        raise ConfigError(f"'same' padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def conv_output_size(size, kernel, stride=1, padding=0, dilation=1):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tap(xp, u, v, d, s, ho, wo):
    r0, c0 = u * d, v * d
    return xp[:, :, r0:r0 + s * (ho - 1) + 1:s, c0:c0 + s * (wo - 1) + 1:s]


def _live_taps(k, d, s, p, size, out):
    """Kernel offsets whose receptive rows touch at least one non-padding row."""
    live = []
    for u in range(k):
        lo = u * d - p
        hi = lo + s * (out - 1)
        if hi >= 0 and lo < size:
            live.append(u)
    return live


# live-tap count above which stride-1 depthwise convs go through the FFT path
FFT_TAP_THRESHOLD = 12


def _dilated_kernel(wd, d, rows, cols):
    """Live part of a depthwise kernel ``[C, 1, k, k]`` as a dense dilated ``[C, Eh, Ew]``."""
    c = wd.shape[0]
    eh, ew = d * (rows[-1] - rows[0]) + 1, d * (cols[-1] - cols[0]) + 1
    dense = np.zeros((c, eh, ew), dtype=wd.dtype)
    dense[:, ::d, ::d] = wd[:, 0, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return dense


def _live_pad(live, d, p, size, out):
    """(left, right) padding once dead leading/trailing taps are dropped."""
    left = p - live[0] * d
    right = out + d * (live[-1] - live[0]) - size - left
    return left, right


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """2-D cross-correlation with zero padding, dilation and channel groups.

    ``weight`` is ``[C_out, C_in // groups, k, k]``; ``bias`` is ``[C_out]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2:
        raise ConfigError(f"square kernels only, got {k}x{k2}")
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide C_in={c} and C_out={o}")
    if cg != c // groups:
        raise ContractError(f"kernel expects {cg * groups} input channels, input has {c}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ConfigError("stride and dilation must be >= 1, padding >= 0")
    if bias is not None:
        bias = as_tensor(bias, like=x)
        if bias.shape != (o,):
            raise ContractError(f"bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be {ho}x{wo} for input {h}x{w}")

    p, d, s, g = padding, dilation, stride, groups
    xd, wd = x.data, weight.data
    og = o // g
    depthwise = cg == 1 and og == 1
    pointwise = k == 1 and s == 1 and p == 0 and g == 1
    use_fft = False
    if depthwise:
        rows = _live_taps(k, d, s, p, h, ho)
        cols_ = _live_taps(k, d, s, p, w, wo)
        use_fft = s == 1 and len(rows) * len(cols_) > FFT_TAP_THRESHOLD
        if use_fft:
            ph, pw = _live_pad(rows, d, p, h, ho), _live_pad(cols_, d, p, w, wo)
            use_fft = min(ph + pw) >= 0
    xp = None if use_fft else (np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd)
    record_macs("conv2d", n * o * cg * k * k * ho * wo)

    if pointwise:
        wm = wd[:, :, 0, 0]
        out = np.matmul(wm, xd.reshape(n, c, h * w)).reshape(n, o, ho, wo)
    elif use_fft:
        # circular correlation on a grid at least as large as the padded input
        # (dead border taps dropped), so valid outputs never wrap
        xq = np.pad(xd, ((0, 0), (0, 0), ph, pw))
        fs = (sfft.next_fast_len(xq.shape[2], real=True), sfft.next_fast_len(xq.shape[3], real=True))
        xf = sfft.rfft2(xq, s=fs)
        kf = sfft.rfft2(_dilated_kernel(wd, d, rows, cols_), s=fs)
        out = sfft.irfft2(xf * np.conj(kf)[None], s=fs)[:, :, :ho, :wo].astype(xd.dtype)
    elif depthwise:
        out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
        for u in rows:
            for v in cols_:
                out += _tap(xp, u, v, d, s, ho, wo) * wd[:, 0, u, v][None, :, None, None]
    else:
        cols = np.stack([_tap(xp, u, v, d, s, ho, wo) for u in range(k) for v in range(k)], axis=2)
        # cols: [n, c, k*k, ho, wo] -> [n, g, cg*k*k, ho*wo]
        cols = cols.reshape(n, g, cg * k * k, ho * wo)
        wm = wd.reshape(g, og, cg * k * k)
        out = np.matmul(wm[None], cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(gout):
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        if pointwise:
            gm = gout.reshape(n, o, h * w)
            xm = xd.reshape(n, c, h * w)
            gw = np.tensordot(gm, xm, axes=([0, 2], [0, 2]))[:, :, None, None]
            gx = np.matmul(wm.T, gm).reshape(n, c, h, w)
            return gx, gw.astype(wd.dtype, copy=False), gb
        if use_fft:
            gf = sfft.rfft2(gout, s=fs)
            gx = sfft.irfft2(gf * kf[None], s=fs)
            gx = gx[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w].astype(xd.dtype)
            corr = sfft.irfft2((xf * np.conj(gf)).sum(axis=0), s=fs)
            gw = np.zeros_like(wd)
            eh, ew = d * (rows[-1] - rows[0]) + 1, d * (cols_[-1] - cols_[0]) + 1
            gw[:, 0, rows[0]:rows[-1] + 1, cols_[0]:cols_[-1] + 1] = corr[:, :eh:d, :ew:d]
            return gx, gw, gb
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        if depthwise:
            for u in rows:
                for v in cols_:
                    r0, c0 = u * d, v * d
                    sl = (slice(None), slice(None),
                          slice(r0, r0 + s * (ho - 1) + 1, s), slice(c0, c0 + s * (wo - 1) + 1, s))
                    gw[:, 0, u, v] = np.einsum("nchw,nchw->c", gout, xp[sl])
                    gxp[sl] += gout * wd[:, 0, u, v][None, :, None, None]
        else:
            gm = gout.reshape(n, g, og, ho * wo)
            gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(np.swapaxes(wm, -1, -2)[None], gm)
            gcols = gcols.reshape(n, c, k * k, ho, wo)
            for u in range(k):
                for v in range(k):
                    r0, c0 = u * d, v * d
                    sl = (slice(None), slice(None),
                          slice(r0, r0 + s * (ho - 1) + 1, s), slice(c0, c0 + s * (wo - 1) + 1, s))
                    gxp[sl] += gcols[:, :, u * k + v]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


# ---------------------------------------------------------------------------

def sigmoid(x):
    xd = x.data
    pos = xd >= 0
    # sign-split form: never exponentiates a positive argument
    z = np.exp(-np.abs(xd))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)
    record_macs("sigmoid", out.size)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)
    record_macs("gelu", out.size)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), bw)


def relu(x):
    xd = x.data
    mask = xd > 0
    record_macs("relu", xd.size)
    return _node(xd * mask, (x,), lambda g: (g * mask,))


def softmax(x, axis):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    record_macs("softmax", out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def softmax_channels(x):
    """Per-pixel softmax across the channel axis."""
    return softmax(x, axis=1)


def log_softmax(x, axis):
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    record_macs("log_softmax", out.size)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


def channel_pool_concat(g):
    """``[mean_C(g); max_C(g)]`` -> ``[N, 2, H, W]``."""
    gd = g.data
    if gd.ndim != 4 or gd.shape[1] < 1:
        raise ContractError(f"channel_pool_concat expects [N,C,H,W] with C>=1, got {gd.shape}")
    c = gd.shape[1]
    idx = gd.argmax(axis=1)
    out = np.concatenate([gd.mean(axis=1, keepdims=True), gd.max(axis=1, keepdims=True)], axis=1)
    record_macs("channel_pool", 2 * gd.size)

    def bw(gout):
        gx = np.broadcast_to(gout[:, :1] / c, gd.shape).copy()
        np.put_along_axis(gx, idx[:, None],
                          np.take_along_axis(gx, idx[:, None], axis=1) + gout[:, 1:2], axis=1)
        return (gx,)

    return _node(out, (g,), bw)


def layer_norm_channels(x, scale, shift, eps=1e-5):
    """Normalize each pixel's channel vector, then apply per-channel affine."""
    scale, shift = as_tensor(scale, like=x), as_tensor(shift, like=x)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    sc = scale.data[None, :, None, None]
    out = xhat * sc + shift.data[None, :, None, None]
    record_macs("layer_norm", out.size)

    def bw(g):
        gs = (g * xhat).sum(axis=(0, 2, 3))
        gsh = g.sum(axis=(0, 2, 3))
        gh = g * sc
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, gs, gsh

    return _node(out, (x, scale, shift), bw)


def _interp_matrix(size, factor, dtype):
    """Row-stochastic ``[size*factor, size]`` bilinear weights, half-pixel centers."""
    out = size * factor
    m = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def upsample_bilinear(x, factor):
    """Bilinear upsampling by an integer factor (align-corners false)."""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    xd = x.data
    n, c, h, w = xd.shape
    mh = _interp_matrix(h, factor, xd.dtype)
    mw = _interp_matrix(w, factor, xd.dtype)
    out = mh @ xd @ mw.T
    record_macs("upsample", out.size)
    return _node(out, (x,), lambda g: (mh.T @ g @ mw,))


def ensure_finite(t, label="tensor"):
    if not np.all(np.isfinite(t.data)):
        from .errors import NumericalError
        raise NumericalError(f"non-finite values in {label}")
    return t


__all__ = [
    "conv2d", "sigmoid", "gelu", "relu", "softmax", "softmax_channels", "log_softmax",
    "channel_pool_concat", "layer_norm_channels", "upsample_bilinear", "same_padding",
    "conv_output_size", "Tensor",
]
