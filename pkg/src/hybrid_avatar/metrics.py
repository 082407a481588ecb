"""Image metrics (L1, PSNR, SSIM) and mask overlap."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5   # radius 5 at sigma 1.5, i.e. an 11 x 11 window
SSIM_K = (0.01, 0.03)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    d = np.abs(a - b)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        d = d[m]
        if d.size == 0:
            return 0.0
    return float(d.mean())


def psnr(a, b, mask=None, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    d = (a - b) ** 2
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    mse = float(d.mean()) if d.size else 0.0
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse)))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over an (H, W) or (H, W, C) image with a Gaussian window.

    Uses population statistics and ignores a border of half the window
    width where the window would leave the image.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (SSIM_K[0] * data_range) ** 2
    c2 = (SSIM_K[1] * data_range) ** 2
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]

        def blur(img):
            return gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_TRUNCATE)

        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s[pad:s.shape[0] - pad, pad:s.shape[1] - pad].mean())
    return float(np.mean(vals))


def iou(a, b) -> float:
    """Intersection over union of two boolean masks; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)
