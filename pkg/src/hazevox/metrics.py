"""Image quality metrics: PSNR, single-scale SSIM, and mean CIEDE2000.

All three operate on linear-radiance images in [0, 1] and are symmetric
in their arguments. PSNR of identical images returns the +inf sentinel;
SSIM follows the canonical single-scale form (11x11 Gaussian window,
sigma 1.5, K1=0.01 / K2=0.03 on unit range) computed on BT.601 luma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2
_LUMA = np.array([0.299, 0.587, 0.114])

# sRGB primaries (linear) to CIE XYZ, D65 white.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = np.array([0.95047, 1.0, 1.08883])


@dataclass(frozen=True)
class MetricTriple:
    """One (psnr, ssim, ciede2000) measurement; psnr may be +inf."""

    psnr: float
    ssim: float
    ciede2000: float


def _pixels(img) -> np.ndarray:
    px = img.pixels if hasattr(img, "pixels") else np.asarray(img)
    return np.asarray(px, dtype=np.float64)


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB over all channels, peak 1.0."""
    pa, pb = _pixels(a), _pixels(b)
    _check_dims(pa, pb)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2D correlation with 'valid' boundary handling."""
    n = len(kernel)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0)
    out = rows @ kernel
    cols = np.lib.stride_tricks.sliding_window_view(out, n, axis=1)
    return cols @ kernel


def ssim(a, b) -> float:
    """Mean local SSIM between two images, computed on luma."""
    pa, pb = _pixels(a), _pixels(b)
    _check_dims(pa, pb)
    if pa.ndim == 3:
        pa = pa @ _LUMA
        pb = pb @ _LUMA
    if min(pa.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu1 = _filter_valid(pa, k)
    mu2 = _filter_valid(pb, k)
    s11 = _filter_valid(pa * pa, k) - mu1 * mu1
    s22 = _filter_valid(pb * pb, k) - mu2 * mu2
    s12 = _filter_valid(pa * pb, k) - mu1 * mu2
    num = (2 * mu1 * mu2 + _C1) * (2 * s12 + _C2)
    den = (mu1 * mu1 + mu2 * mu2 + _C1) * (s11 + s22 + _C2)
    return float(np.mean(num / den))


def linear_rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Linear sRGB-primary values (..., 3) to CIELAB under D65."""
    xyz = np.asarray(rgb, dtype=np.float64) @ _RGB_TO_XYZ.T
    t = xyz / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e_ciede2000(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIEDE2000 color difference between Lab arrays of shape (..., 3).

    Implements the standard formulation including the hue-rotation term;
    verified against the published conformance pairs.
    """
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar = 0.5 * (c1 + c2)
    c7 = cbar ** 7
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0 ** 7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where((b1 == 0) & (a1p == 0), 0.0, h1p)
    h2p = np.where((b2 == 0) & (a2p == 0), 0.0, h2p)

    dlp = l2 - l1
    dcp = c2p - c1p
    zero_chroma = (c1p * c2p) == 0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(zero_chroma, 0.0, dh)
    dhp = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    lbp = 0.5 * (l1 + l2)
    cbp = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    habs = np.abs(h1p - h2p)
    hbp = np.where(
        zero_chroma,
        hsum,
        np.where(
            habs <= 180.0,
            0.5 * hsum,
            np.where(hsum < 360.0, 0.5 * (hsum + 360.0), 0.5 * (hsum - 360.0)),
        ),
    )

    t = (
        1.0
        - 0.17 * np.cos(np.radians(hbp - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbp))
        + 0.32 * np.cos(np.radians(3.0 * hbp + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbp - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbp - 275.0) / 25.0) ** 2))
    cbp7 = cbp ** 7
    rc = 2.0 * np.sqrt(cbp7 / (cbp7 + 25.0 ** 7))
    sl = 1.0 + 0.015 * (lbp - 50.0) ** 2 / np.sqrt(20.0 + (lbp - 50.0) ** 2)
    sc = 1.0 + 0.045 * cbp
    sh = 1.0 + 0.015 * cbp * t
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    return np.sqrt(
        (dlp / sl) ** 2
        + (dcp / sc) ** 2
        + (dhp / sh) ** 2
        + rt * (dcp / sc) * (dhp / sh)
    )


def ciede2000(a, b) -> float:
    """Mean per-pixel CIEDE2000 after converting both images to CIELAB."""
    pa, pb = _pixels(a), _pixels(b)
    _check_dims(pa, pb)
    de = delta_e_ciede2000(linear_rgb_to_lab(pa), linear_rgb_to_lab(pb))
    return float(np.mean(de))


def compute_metrics(a, b) -> MetricTriple:
    return MetricTriple(psnr=psnr(a, b), ssim=ssim(a, b), ciede2000=ciede2000(a, b))
