"""Full-reference image quality: PSNR, SSIM and pixel-domain VIF."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INF_SENTINEL = "inf"


@dataclass
class QualityScore:
    psnr: float
    ssim: float
    vif: float


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"dimension mismatch {ref.shape} vs {test.shape}")
    return ref, test


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps (the separable factor of the 2-D window)."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, taps):
    out = sliding_window_view(img, len(taps), axis=0) @ taps
    return sliding_window_view(out, len(taps), axis=1) @ taps


def psnr(ref, test, peak=1.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical images."""
    ref, test = _pair(ref, test)
    mse = np.mean((ref - test) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(peak * peak / mse))


def ssim(ref, test, peak=1.0, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows."""
    ref, test = _pair(ref, test)
    if min(ref.shape) < window:
        raise ValueError(f"image {ref.shape} smaller than the {window}x{window} window")
    taps = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu1, mu2 = _filter_valid(ref, taps), _filter_valid(test, taps)
    mu11, mu22, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s11 = _filter_valid(ref * ref, taps) - mu11
    s22 = _filter_valid(test * test, taps) - mu22
    s12 = _filter_valid(ref * test, taps) - mu12
    smap = ((2 * mu12 + c1) * (2 * s12 + c2)) / ((mu11 + mu22 + c1) * (s11 + s22 + c2))
    return float(smap.mean())


VIF_MIN_SIZE = 17


def vif(ref, test, peak=1.0, scales=4, noise_var=2.0) -> float:
    """Pixel-domain visual information fidelity over a 4-level Gaussian pyramid.

    Intensities are rescaled to a 0..255 range so that the default HVS
    noise variance of 2 carries its usual meaning. Pyramid levels that
    shrink below their window size are skipped, which lets 20-row iris
    strips be scored on the levels that still fit.
    """
    ref, test = _pair(ref, test)
    if min(ref.shape) < VIF_MIN_SIZE:
        raise ValueError(f"image {ref.shape} too small for VIF (min side {VIF_MIN_SIZE})")
    eps = 1e-10
    ref = ref * (255.0 / peak)
    test = test * (255.0 / peak)
    num = den = 0.0
    for scale in range(1, scales + 1):
        n = 2 ** (scales - scale + 1) + 1
        taps = gaussian_window(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = _filter_valid(ref, taps)[::2, ::2]
            test = _filter_valid(test, taps)[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1, mu2 = _filter_valid(ref, taps), _filter_valid(test, taps)
        s11 = np.maximum(_filter_valid(ref * ref, taps) - mu1 * mu1, 0)
        s22 = np.maximum(_filter_valid(test * test, taps) - mu2 * mu2, 0)
        s12 = _filter_valid(ref * test, taps) - mu1 * mu2

        flat_ref = s11 < eps
        g = s12 / np.where(flat_ref, 1.0, s11)  # exact gain: identical inputs give g = 1
        sv = s22 - g * s12
        g[flat_ref] = 0
        sv[flat_ref] = s22[flat_ref]
        s11 = np.where(flat_ref, 0, s11)
        flat_test = s22 < eps
        g[flat_test] = 0
        sv[flat_test] = 0
        neg = g < 0
        sv[neg] = s22[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += np.sum(np.log10(1 + g * g * s11 / (sv + noise_var)))
        den += np.sum(np.log10(1 + s11 / noise_var))
    if den == 0:
        # reference carries no information at any level
        return 1.0 if num == 0 else float("inf")
    return float(num / den)


def quality(ref, test, peak=1.0) -> QualityScore:
    return QualityScore(psnr(ref, test, peak), ssim(ref, test, peak), vif(ref, test, peak))


def format_value(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and np.isinf(v):
        return INF_SENTINEL
    return f"{v:.6g}" if isinstance(v, float) else str(v)
