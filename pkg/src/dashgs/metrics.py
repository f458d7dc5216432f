"""Image losses and quality metrics on float images in [0, 1], shape (H, W, C)."""

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur(x, w):
    # zero padding outside the image; the window is symmetric so this is self-adjoint
    x = correlate1d(x, w, axis=0, mode="constant")
    return correlate1d(x, w, axis=1, mode="constant")


def l1_loss(a, b):
    a, b = _check(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b):
    """d l1_loss / d a (subgradient 0 where equal)."""
    a, b = _check(a, b)
    return np.sign(a - b) / a.size


def mse(a, b):
    a, b = _check(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """PSNR in dB for a peak of 1; ``inf`` for identical images."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return -10.0 * math.log10(m)


def _ssim_terms(a, b):
    w = gaussian_window()
    mu_a, mu_b = _blur(a, w), _blur(b, w)
    e_aa, e_bb, e_ab = _blur(a * a, w), _blur(b * b, w), _blur(a * b, w)
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * (e_ab - mu_a * mu_b) + C2
    B1 = mu_a**2 + mu_b**2 + C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + C2
    return w, mu_a, mu_b, A1, A2, B1, B2


def ssim_map(a, b):
    a, b = _check(a, b)
    _, _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return (A1 * A2) / (B1 * B2)


def ssim(a, b):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, zero padding) over pixels and channels."""
    return float(np.mean(ssim_map(a, b)))


def ssim_grad(a, b):
    """Returns ``(ssim, d ssim / d a)``."""
    a, b = _check(a, b)
    w, mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    num = A1 * A2
    den = B1 * B2
    s = num / den
    scale = 1.0 / a.size
    d_mu = (2 * mu_b * (A2 - A1) * den - num * 2 * mu_a * (B2 - B1)) / den**2 * scale
    d_eab = 2 * A1 / den * scale
    d_eaa = -s / B2 * scale
    grad = _blur(d_mu, w) + 2 * a * _blur(d_eaa, w) + b * _blur(d_eab, w)
    return float(np.mean(s)), grad


def dssim_loss(a, b):
    return (1.0 - ssim(a, b)) / 2.0


def dssim_grad(a, b):
    s, g = ssim_grad(a, b)
    return (1.0 - s) / 2.0, -0.5 * g
