"""Image quality scores: MSE, PSNR and SSIM."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core.ops import ShapeError

K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError("metric", "image shapes differ", x=x.shape, ref=ref.shape)
    return x, ref


def mse(x, ref) -> float:
    x, ref = _pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def _range(x, ref, symmetric):
    if symmetric:
        return float(max(x.max(), ref.max()) - min(x.min(), ref.min()))
    return float(ref.max() - ref.min())


def psnr(x, ref, symmetric: bool = False) -> float:
    """``10 log10(peak^2 / mse)``; ``math.inf`` when the images coincide."""
    x, ref = _pair(x, ref)
    err = mse(x, ref)
    if err == 0.0:
        return math.inf
    peak = _range(x, ref, symmetric)
    return 10.0 * math.log10(peak**2 / err)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img, w):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)


def ssim(x, ref, symmetric: bool = False) -> float:
    """Mean local SSIM over all full 11x11 Gaussian windows (sigma 1.5)."""
    x, ref = _pair(x, ref)
    if x.ndim == 3 and x.shape[-1] == 1:
        x, ref = x[..., 0], ref[..., 0]
    if x.ndim != 2 or min(x.shape) < WINDOW:
        raise ShapeError("ssim", f"image must be 2-D and at least {WINDOW}x{WINDOW}", shape=x.shape)
    if np.array_equal(x, ref):
        return 1.0
    # a flat reference has no dynamic range; fall back to unit range
    data_range = _range(x, ref, symmetric) or 1.0
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    w = gaussian_window()
    mx, my = _filter(x, w), _filter(ref, w)
    sxx = _filter(x * x, w) - mx * mx
    syy = _filter(ref * ref, w) - my * my
    sxy = _filter(x * ref, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
