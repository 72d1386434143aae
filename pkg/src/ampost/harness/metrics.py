"""Reconstruction quality metrics."""

from __future__ import annotations

import math

import numpy as np

PSNR_IDENTICAL = math.inf


def mse(x, ref) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / mse)``; identical inputs give ``inf``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(x, ref)
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / err)


def _box_filter(a: np.ndarray, win: int) -> np.ndarray:
    """Mean over every full ``win``-sized window along each axis (valid region)."""
    out = a
    for ax in range(a.ndim):
        c = np.cumsum(out, axis=ax)
        zero = np.zeros_like(np.take(c, [0], axis=ax))
        c = np.concatenate([zero, c], axis=ax)
        n = out.shape[ax]
        hi = np.take(c, np.arange(win, n + 1), axis=ax)
        lo = np.take(c, np.arange(0, n - win + 1), axis=ax)
        out = (hi - lo) / win
    return out


def ssim(x, ref, peak: float = 1.0, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         shape: tuple[int, ...] | None = None) -> float:
    """Mean SSIM over all full sliding uniform windows.

    2D arrays (or ``shape`` with two entries) use a square window; 1D arrays
    use a 1D window over the flattened order, as for vertex signals.  The
    local covariances use the unbiased window normalization.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if shape is not None:
        x = x.reshape(shape)
        ref = ref.reshape(shape)
    if x.ndim > 2:
        raise ValueError("ssim expects a 1D or 2D signal")
    if window < 2 or any(n < window for n in x.shape):
        raise ValueError(f"window {window} larger than signal {x.shape}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    npts = window ** x.ndim
    cov_norm = npts / (npts - 1.0)
    ux = _box_filter(x, window)
    ur = _box_filter(ref, window)
    uxx = _box_filter(x * x, window)
    urr = _box_filter(ref * ref, window)
    uxr = _box_filter(x * ref, window)
    vx = cov_norm * (uxx - ux * ux)
    vr = cov_norm * (urr - ur * ur)
    vxr = cov_norm * (uxr - ux * ur)
    num = (2 * ux * ur + c1) * (2 * vxr + c2)
    den = (ux * ux + ur * ur + c1) * (vx + vr + c2)
    return float(np.mean(num / den))
