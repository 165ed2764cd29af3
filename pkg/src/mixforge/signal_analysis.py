"""DSP kernels behind the frequency and texture prompt streams.

All functions are pure numpy and operate along ``axis`` (default: the
last axis) so the same kernel serves a waveform or the token axis of an
embedding matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AnalyticSignal:
    real: np.ndarray
    imag: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @property
    def envelope(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


@dataclass(frozen=True)
class MultiScaleSet:
    x_high: np.ndarray
    x_all: np.ndarray
    x_low: np.ndarray


@dataclass(frozen=True)
class IFFeatures:
    f_high: np.ndarray
    f_all: np.ndarray
    f_low: np.ndarray


@dataclass(frozen=True)
class TextureCues:
    psi: np.ndarray
    psi_bar: np.ndarray
    flux: np.ndarray


def hilbert_multiplier(n: int) -> np.ndarray:
    """Spectral weights turning an FFT into that of the analytic signal."""
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return h


def hilbert_analytic(x, axis: int = -1) -> AnalyticSignal:
    """Analytic signal of a real sequence via the FFT.

    Negative-frequency bins are zeroed, positive ones doubled, DC and
    Nyquist kept. The real part of the result is *x* itself.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n < 2:
        raise ValueError(f"hilbert_analytic needs length >= 2, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("hilbert_analytic input contains non-finite values")
    shape = [1] * x.ndim
    shape[axis] = n
    z = np.fft.ifft(np.fft.fft(x, axis=axis) * hilbert_multiplier(n).reshape(shape), axis=axis)
    return AnalyticSignal(real=x.copy(), imag=z.imag)


def hilbert_matrix(n: int) -> np.ndarray:
    """Matrix ``M`` with ``M @ x == hilbert_analytic(x).imag`` for length-n ``x``."""
    return hilbert_analytic(np.eye(n), axis=0).imag


def instantaneous_phase(z: AnalyticSignal) -> np.ndarray:
    """Four-quadrant phase in (-pi, pi]; the origin maps to 0."""
    theta = np.arctan2(z.imag, z.real)
    # arctan2 returns -pi for (negative real, -0.0 imag)
    return np.where(theta <= -np.pi, np.pi, theta)


def wrap_phase(d):
    """Map angles to (-pi, pi]."""
    d = np.asarray(d, dtype=np.float64)
    w = d - 2.0 * np.pi * np.floor((d + np.pi) / (2.0 * np.pi))
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def instantaneous_frequency(theta, axis: int = -1, wrap: bool = True) -> np.ndarray:
    """Absolute adjacent phase difference in rad/sample, same length as *theta*.

    ``wrap=False`` reproduces the literal difference of principal-value
    phases, which spikes near 2*pi wherever the phase wraps.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[axis] < 2:
        raise ValueError("instantaneous_frequency needs at least 2 steps")
    d = np.diff(theta, axis=axis)
    if wrap:
        d = wrap_phase(d)
    f = np.abs(d)
    first = np.take(f, [0], axis=axis)
    return np.concatenate([first, f], axis=axis)


def high_pass_matrix(n: int) -> np.ndarray:
    """First difference with a zero first row."""
    m = np.eye(n) - np.eye(n, k=-1)
    m[0, 0] = 0.0
    return m


def moving_average_matrix(n: int, window: int = 3) -> np.ndarray:
    """Centered moving average with edge replication."""
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    left = (window - 1) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for k in range(i - left, i - left + window):
            m[i, min(max(k, 0), n - 1)] += 1.0 / window
    return m


def decompose_multiscale(x, pool_window: int = 3, axis: int = -1) -> MultiScaleSet:
    """Split a sequence into differenced, original and smoothed components."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n < 2:
        raise ValueError(f"decompose_multiscale needs length >= 2, got {n}")
    xm = np.moveaxis(x, axis, 0)
    high = np.zeros_like(xm)
    high[1:] = xm[1:] - xm[:-1]
    left = (pool_window - 1) // 2
    padded = np.concatenate(
        [np.repeat(xm[:1], left, axis=0), xm, np.repeat(xm[-1:], pool_window - 1 - left, axis=0)]
    )
    csum = np.concatenate([np.zeros_like(xm[:1]), np.cumsum(padded, axis=0)])
    low = (csum[pool_window:] - csum[:-pool_window]) / pool_window
    return MultiScaleSet(
        x_high=np.moveaxis(high, 0, axis),
        x_all=x.copy(),
        x_low=np.moveaxis(low, 0, axis),
    )


def if_features(x, pool_window: int = 3, axis: int = -1, wrap: bool = True) -> IFFeatures:
    """Transient, global and trend instantaneous frequency of *x*."""
    parts = decompose_multiscale(x, pool_window, axis=axis)

    def _if(component):
        theta = instantaneous_phase(hilbert_analytic(component, axis=axis))
        return instantaneous_frequency(theta, axis=axis, wrap=wrap)

    return IFFeatures(f_high=_if(parts.x_high), f_all=_if(parts.x_all), f_low=_if(parts.x_low))


def tkeo(x, axis: int = -1) -> np.ndarray:
    """Teager-Kaiser energy ``x[n]**2 - x[n-1]*x[n+1]``.

    The two endpoints copy their nearest interior value.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] < 3:
        raise ValueError(f"tkeo needs length >= 3, got {x.shape[axis]}")
    xm = np.moveaxis(x, axis, 0)
    inner = xm[1:-1] ** 2 - xm[:-2] * xm[2:]
    psi = np.concatenate([inner[:1], inner, inner[-1:]])
    return np.moveaxis(psi, 0, axis)


def feature_flux(h) -> np.ndarray:
    """Population std over time of ``|h[n] - h[n-1]|`` per feature column.

    *h* is ``(..., time, dim)``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim < 2 or h.shape[-2] < 2:
        raise ValueError(f"feature_flux needs >= 2 time steps, got shape {h.shape}")
    return np.abs(np.diff(h, axis=-2)).std(axis=-2)


def texture_cues(h) -> TextureCues:
    """TKEO magnitude, its time mean and the feature flux of ``(..., time, dim)`` features."""
    h = np.asarray(h, dtype=np.float64)
    psi = np.abs(tkeo(h, axis=-2))
    return TextureCues(psi=psi, psi_bar=psi.mean(axis=-2), flux=feature_flux(h))


def analyze_waveform(samples, pool_window: int = 3, wrap: bool = True) -> dict:
    """Per-sample IF features and |TKEO| of a raw waveform, keyed by column name."""
    x = np.asarray(samples, dtype=np.float64)
    feats = if_features(x, pool_window, wrap=wrap)
    return {
        "n": np.arange(x.size),
        "f_high": feats.f_high,
        "f_all": feats.f_all,
        "f_low": feats.f_low,
        "psi": np.abs(tkeo(x)),
    }
