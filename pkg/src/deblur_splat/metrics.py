"""Image quality metrics (PSNR, SSIM) with the SSIM gradient used by the loss."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) in dB; identical images give +inf."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering over the two spatial axes; symmetric kernel => self-adjoint
    out = correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a, b, g):
    ma, mb = _blur(a, g), _blur(b, g)
    eaa, ebb, eab = _blur(a * a, g), _blur(b * b, g), _blur(a * b, g)
    A1 = 2 * ma * mb + C1
    A2 = 2 * (eab - ma * mb) + C2
    B1 = ma * ma + mb * mb + C1
    B2 = (eaa - ma * ma) + (ebb - mb * mb) + C2
    return ma, mb, A1, A2, B1, B2


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    a, b = _check(a, b)
    *_, A1, A2, B1, B2 = _ssim_terms(a, b, gaussian_window())
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_and_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    a, b = _check(a, b)
    g = gaussian_window()
    ma, mb, A1, A2, B1, B2 = _ssim_terms(a, b, g)
    den = B1 * B2
    S = A1 * A2 / den
    n = S.size
    dA1 = A2 / den
    dA2 = A1 / den
    dB1 = -S / B1
    dB2 = -S / B2
    d_ma = 2 * mb * dA1 - 2 * mb * dA2 + 2 * ma * dB1 - 2 * ma * dB2
    grad = _blur(d_ma, g) + 2 * a * _blur(dB2, g) + b * _blur(2 * dA2, g)
    return float(S.mean()), grad / n
