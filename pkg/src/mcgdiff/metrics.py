"""Reconstruction metrics (peak = 1)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 1.0


def mse(x, ref) -> float:
    return float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))


def psnr(x, ref, peak: float = PEAK) -> float:
    err = mse(x, ref)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / err))


def ssim(x, ref, peak: float = PEAK, window: int = 8) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows, averaged over channels."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.ndim == 2:
        x, ref = x[..., None], ref[..., None]
    if x.ndim != 3 or min(x.shape[:2]) < window:
        return float("nan")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for ch in range(x.shape[2]):
        wx = sliding_window_view(x[..., ch], (window, window))
        wy = sliding_window_view(ref[..., ch], (window, window))
        mx, my = wx.mean(axis=(-1, -2)), wy.mean(axis=(-1, -2))
        vx = wx.var(axis=(-1, -2))
        vy = wy.var(axis=(-1, -2))
        cov = (wx * wy).mean(axis=(-1, -2)) - mx * my
        smap = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


def mse_mc(y, Hx) -> float:
    """Measurement-consistency error ``|y - H x|^2 / m``."""
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum((y - np.asarray(Hx)) ** 2) / y.size)
