"""Frequency-domain views of feature maps.

Convention used by every report: spectra are DC-centred, the radius of
frequency ``(ky, kx)`` is ``hypot(ky, kx)`` divided by the corner distance
``hypot(H // 2, W // 2)`` so that r lies in [0, 1], and amplitudes are
summarized as the mean of ``log(1 + |X|)`` (natural log) per radial bin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor

HF_THRESHOLD = 0.5


def _array(x):
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if a.ndim != 4:
        raise ContractError(f"expected [N, C, H, W], got shape {a.shape}")
    if a.shape[2] < 2 or a.shape[3] < 2:
        raise ContractError(f"spectra need H, W >= 2, got {a.shape[2]}x{a.shape[3]}")
    return a.astype(np.float64, copy=False)


def fft2(x):
    """Unnormalized 2-D DFT over the two spatial axes (complex128, not shifted)."""
    return np.fft.fft2(_array(x), axes=(2, 3))


def radius_grid(h, w):
    """Normalized radius of every DC-centred frequency sample, shape [h, w]."""
    ky = np.arange(h) - h // 2
    kx = np.arange(w) - w // 2
    r = np.hypot(ky[:, None], kx[None, :])
    return r / np.hypot(h // 2, w // 2)


@dataclass
class RadialSpectrum:
    radii: np.ndarray        # bin centres
    log_amplitude: np.ndarray
    counts: np.ndarray       # frequency samples per bin (0 -> value reported as 0)


def fft2_radial_spectrum(x, bins):
    if not isinstance(bins, (int, np.integer)) or bins < 1:
        raise ConfigError(f"bins must be a positive integer, got {bins!r}")
    a = _array(x)
    h, w = a.shape[2:]
    amp = np.abs(np.fft.fftshift(fft2(a), axes=(2, 3))).mean(axis=(0, 1))
    r = radius_grid(h, w)
    idx = np.minimum((r * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins)
    sums = np.bincount(idx.ravel(), weights=np.log1p(amp).ravel(), minlength=bins)
    values = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    centres = (np.arange(bins) + 0.5) / bins
    return RadialSpectrum(centres, values, counts)


def spatial_energy(x):
    a = _array(x)
    return float(np.sum(a * a))


def spectral_energy(x):
    """Sum of |DFT|^2 / (H W); equals ``spatial_energy`` by Parseval."""
    a = _array(x)
    f = fft2(a)
    return float(np.sum(f.real ** 2 + f.imag ** 2) / (a.shape[2] * a.shape[3]))


def high_frequency_ratio(x, threshold=HF_THRESHOLD):
    """Share of spectral power at normalized radius above ``threshold``. 0 for an all-zero map."""
    a = _array(x)
    f = np.fft.fftshift(fft2(a), axes=(2, 3))
    power = (f.real ** 2 + f.imag ** 2).sum(axis=(0, 1))
    total = power.sum()
    if total == 0:
        return 0.0
    return float(power[radius_grid(*a.shape[2:]) > threshold].sum() / total)
