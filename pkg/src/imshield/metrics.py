"""Image quality metrics: PSNR, local PSNR, SSIM, and mask BCE.

All metrics operate on [0,1]-valued arrays (peak defaults to 1.0); use
``to_unit`` to map pipeline images from [-1,1]. Arrays are channel-first
(C,H,W) or plain 2D. Identical inputs give the +inf PSNR sentinel; an empty
mask gives the NaN local-PSNR sentinel (rendered as a blank report cell).
"""

from __future__ import annotations

import math

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# JPEG/Rec.601 luma weights, used wherever a single-channel view is needed
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _np(a):
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def to_unit(img):
    """Map a [-1,1] pipeline image to [0,1] for metric computation."""
    return (_np(img).astype(np.float64) + 1.0) / 2.0


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def local_psnr(a, b, mask, peak: float = 1.0) -> float:
    """PSNR with the error restricted to mask==1 pixels (mask is 2D, broadcast
    over channels). Empty masks have no defined value and return NaN."""
    a, b, m = _np(a).astype(np.float64), _np(b).astype(np.float64), _np(mask)
    if a.shape != b.shape:
        raise ShapeError(f"local_psnr shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-2:] != m.shape[-2:]:
        raise ShapeError(f"mask {m.shape} does not match images {a.shape}")
    n_mask = m.sum()
    if n_mask == 0:
        return math.nan
    channels = 1 if a.ndim == 2 else a.shape[0]
    mse = float((m * ((a - b) ** 2)).sum() / (n_mask * channels))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def luminance(img):
    """Rec.601 luma of a (3,H,W) array; 2D arrays pass through."""
    arr = _np(img).astype(np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[0] == 3:
        r, g, b = arr
        return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    raise ShapeError(f"expected (3,H,W) or (H,W), got {arr.shape}")


def _gaussian_kernel():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


_KERNEL = _gaussian_kernel()


def _windowed_mean(x):
    win = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    return np.einsum("ijkl,kl->ij", win, _KERNEL)


def ssim(a, b, peak: float = 1.0) -> float:
    """Windowed structural similarity on luminance: 11x11 Gaussian window with
    sigma 1.5, K1=0.01, K2=0.03, averaged over all fully-valid windows."""
    la, lb = luminance(a), luminance(b)
    if la.shape != lb.shape:
        raise ShapeError(f"ssim shape mismatch {la.shape} vs {lb.shape}")
    if min(la.shape) < SSIM_WINDOW:
        raise ContractError(
            f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    ux, uy = _windowed_mean(la), _windowed_mean(lb)
    uxx, uyy, uxy = _windowed_mean(la * la), _windowed_mean(lb * lb), _windowed_mean(la * lb)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


def bce(pred, target, eps: float = 1e-7) -> float:
    """Mean binary cross entropy of a soft mask against a binary target."""
    p = np.clip(_np(pred).astype(np.float64), eps, 1.0 - eps)
    t = _np(target).astype(np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"bce shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))
