"""Parameter containers. Modules own named parameters and sub-modules in
attribute-assignment order, which makes parameter names stable across runs."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError
from .tensor import Tensor, default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    def __setattr__(self, key, value):
        if isinstance(value, (Parameter, Module)) or (
            isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value)
        ):
            self.__dict__.setdefault("_order", [])
            if key not in self._order:
                self._order.append(key)
        object.__setattr__(self, key, value)

    def children(self):
        for key in self.__dict__.get("_order", []):
            val = getattr(self, key)
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    yield f"{key}.{i}", m

    def named_parameters(self, prefix=""):
        for key in self.__dict__.get("_order", []):
            val = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Convolution weights plus their geometry.

    ``padding="same"`` resolves to ``dilation * (k - 1) // 2`` and rejects even
    kernels. ``init`` is ``"kaiming"`` or ``"zero"``; biases start at zero.
    """

    def __init__(self, c_in, c_out, kernel=1, stride=1, padding="same", dilation=1,
                 groups=1, bias=True, rng=None, init="kaiming"):
        if c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
        if dilation < 1:
            raise ConfigError("dilation must be >= 1")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.padding = F.same_padding(kernel, dilation) if padding == "same" else int(padding)
        shape = (c_out, c_in // groups, kernel, kernel)
        if init == "zero":
            w = np.zeros(shape)
        elif init == "kaiming":
            rng = rng if rng is not None else np.random.default_rng(0)
            w = kaiming_uniform(rng, shape, (c_in // groups) * kernel * kernel)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(c_out))
        else:
            self.bias = None

    @property
    def depthwise(self):
        return self.groups == self.c_in == self.c_out

    def out_size(self, size):
        return F.conv_output_size(size, self.kernel, self.stride, self.padding, self.dilation)

    def macs(self, n, h, w):
        return n * self.c_out * (self.c_in // self.groups) * self.kernel ** 2 * self.out_size(h) * self.out_size(w)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding,
                        self.dilation, self.groups)

    def __repr__(self):
        return (f"Conv2d({self.c_in}, {self.c_out}, k={self.kernel}, s={self.stride}, "
                f"p={self.padding}, d={self.dilation}, g={self.groups})")


class LayerNorm(Module):
    """Channel-wise layer norm; scale starts at 1 and shift at 0."""

    def __init__(self, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def forward(self, x):
        return F.layer_norm_channels(x, self.scale, self.shift, self.eps)
