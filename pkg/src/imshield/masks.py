"""Tamper-mask sampling, binarization, morphology, rectification, pyramids.

Masks are {0,1}-valued real arrays with 1 = tampered, stored as floats so the
pixel-blend arithmetic stays uniform across the pipeline. Functions accept
numpy arrays or torch tensors and return the caller's kind; binarization and
morphology are not differentiable and detach internally.
"""

from __future__ import annotations

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .config import MaskSpec
from .errors import ConfigurationError, ContractError, ShapeError

_SAMPLE_ATTEMPTS = 300
_PLACE_ATTEMPTS = 40


def _to_numpy(m):
    if isinstance(m, torch.Tensor):
        return m.detach().cpu().numpy(), True
    return np.asarray(m), False


def _from_numpy(arr, was_torch, ref=None):
    if was_torch:
        t = torch.from_numpy(np.ascontiguousarray(arr))
        if ref is not None:
            t = t.to(dtype=ref.dtype)
        return t
    return arr


def sample_tamper_mask(rng: np.random.Generator, spec: MaskSpec, h: int, w: int) -> np.ndarray:
    """Sample a binary tamper mask whose total and largest-region fractions fall
    inside spec.rst_range / spec.rlt_range (checked exactly, per sample)."""
    spec.validate()
    rst_lo, rst_hi = spec.rst_range
    rlt_lo, rlt_hi = spec.rlt_range
    if rst_hi == 0.0:
        return np.zeros((h, w), dtype=np.float32)
    area = float(h * w)

    for _ in range(_SAMPLE_ATTEMPTS):
        n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
        total = rng.uniform(rst_lo, rst_hi)
        if n == 1:
            if not rlt_lo <= total < rlt_hi:
                continue
            fracs = [total]
        else:
            lo_l = max(rlt_lo, total / n)
            hi_l = min(rlt_hi, total)
            if hi_l <= lo_l:
                continue
            largest = rng.uniform(lo_l, hi_l)
            weights = rng.uniform(0.2, 1.0, size=n - 1)
            rest = weights / weights.sum() * (total - largest)
            if (rest >= largest).any():
                continue
            fracs = [largest] + [f for f in rest if f * area >= 1.0]

        mask = _place_regions(rng, fracs, h, w, spec.shape)
        if mask is None:
            continue
        frac = mask.mean()
        if not rst_lo <= frac < rst_hi:
            continue
        if rlt_lo <= largest_region_fraction(mask) < rlt_hi:
            return mask.astype(np.float32)
    raise ConfigurationError(
        f"could not satisfy mask spec {spec} on {h}x{w} after {_SAMPLE_ATTEMPTS} attempts"
    )


def _place_regions(rng, fracs, h, w, shape):
    """Place regions so they never touch (4- or 8-wise); None if placement fails."""
    mask = np.zeros((h, w), dtype=np.float32)
    blocked = np.zeros((h, w), dtype=bool)
    for frac in fracs:
        px = frac * h * w
        if shape == "ellipse":
            px *= 4.0 / np.pi  # bounding-box area for the target ellipse area
        placed = False
        for _ in range(_PLACE_ATTEMPTS):
            aspect = rng.uniform(0.5, 2.0)
            rh = int(np.clip(round(np.sqrt(px * aspect)), 1, h))
            rw = int(np.clip(round(px / rh), 1, w))
            if rh > h or rw > w:
                continue
            y = int(rng.integers(0, h - rh + 1))
            x = int(rng.integers(0, w - rw + 1))
            y0, y1 = max(0, y - 1), min(h, y + rh + 1)
            x0, x1 = max(0, x - 1), min(w, x + rw + 1)
            if blocked[y0:y1, x0:x1].any():
                continue
            if shape == "ellipse":
                yy, xx = np.ogrid[:rh, :rw]
                cy, cx = (rh - 1) / 2.0, (rw - 1) / 2.0
                ell = ((yy - cy) / max(rh / 2.0, 0.5)) ** 2 + (
                    (xx - cx) / max(rw / 2.0, 0.5)
                ) ** 2 <= 1.0
                mask[y : y + rh, x : x + rw][ell] = 1.0
            else:
                mask[y : y + rh, x : x + rw] = 1.0
            blocked[y0:y1, x0:x1] = True
            placed = True
            break
        if not placed:
            return None
    return mask


def largest_region_fraction(mask) -> float:
    """Fraction of the image covered by the largest 4-connected tampered region."""
    arr, _ = _to_numpy(mask)
    labels, count = ndimage.label(arr > 0.5)  # default structure = 4-connectivity
    if count == 0:
        return 0.0
    sizes = np.bincount(labels.ravel())[1:]
    return float(sizes.max()) / arr.size


def binarize_otsu(m_soft):
    """Threshold a soft mask by maximizing between-class variance over a 256-bin
    histogram. Constant inputs binarize to all-zeros (no tamper evidence)."""
    arr, was_torch = _to_numpy(m_soft)
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ContractError("soft mask values must lie in [0,1]")
    out = np.zeros_like(arr, dtype=np.float32)
    flat_axes = arr.reshape(-1, arr.shape[-2], arr.shape[-1]) if arr.ndim > 2 else arr[None]
    out_flat = out.reshape(flat_axes.shape)
    for i in range(flat_axes.shape[0]):
        out_flat[i] = _otsu_single(flat_axes[i])
    return _from_numpy(out, was_torch, ref=m_soft if was_torch else None)


def _otsu_single(x):
    bins = np.clip((x * 256.0).astype(np.int64), 0, 255)
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    valid = (omega > 0.0) & (omega < 1.0)
    if not valid.any():  # constant input
        return np.zeros_like(x, dtype=np.float32)
    sigma = np.zeros(256)
    sigma[valid] = (mu_t * omega[valid] - mu[valid]) ** 2 / (
        omega[valid] * (1.0 - omega[valid])
    )
    k = int(np.argmax(sigma))  # ties resolve to the lowest split
    return (bins > k).astype(np.float32)


def otsu_threshold(x) -> float:
    """The scalar threshold t chosen by binarize_otsu: mask = (values > t)."""
    arr, _ = _to_numpy(x)
    bins = np.clip((arr * 256.0).astype(np.int64), 0, 255)
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    valid = (omega > 0.0) & (omega < 1.0)
    if not valid.any():
        return 1.0
    sigma = np.zeros(256)
    sigma[valid] = (mu_t * omega[valid] - mu[valid]) ** 2 / (
        omega[valid] * (1.0 - omega[valid])
    )
    return (int(np.argmax(sigma)) + 1) / 256.0


# Morphology convention for a k x k square element: erosion window offsets are
# {-(k//2), ..., k-1-k//2}; dilation uses the reflected offsets so that
# dilate(erode(m)) is a true (idempotent) opening.


def _erode(arr, k):
    pad_before, pad_after = k // 2, k - 1 - k // 2
    pads = [(0, 0)] * (arr.ndim - 2) + [(pad_before, pad_after)] * 2
    win = sliding_window_view(np.pad(arr > 0.5, pads), (k, k), axis=(-2, -1))
    return win.all(axis=(-1, -2))


def _dilate(arr, k):
    pad_before, pad_after = k - 1 - k // 2, k // 2
    pads = [(0, 0)] * (arr.ndim - 2) + [(pad_before, pad_after)] * 2
    win = sliding_window_view(np.pad(arr > 0.5, pads), (k, k), axis=(-2, -1))
    return win.any(axis=(-1, -2))


def open_mask(m_bin, k: int = 4):
    """Morphological opening (erode then dilate) with a k x k square element.
    Leading batch dimensions are processed independently."""
    arr, was_torch = _to_numpy(m_bin)
    out = _dilate(_erode(arr, k), k).astype(np.float32)
    return _from_numpy(out, was_torch, ref=m_bin if was_torch else None)


def refine_mask(m_bin, k: int = 4):
    """Opening to kill sub-kernel pulses, then one extra dilation so the final
    mask slightly enlarges the detected area. Batched along leading dims."""
    arr, was_torch = _to_numpy(m_bin)
    out = _dilate(_dilate(_erode(arr, k), k), k).astype(np.float32)
    return _from_numpy(out, was_torch, ref=m_bin if was_torch else None)


def rectify(img, m_bin, fill: float = 0.0):
    """Replace tampered pixels with a neutral fill (range midpoint by default)."""
    mask = m_bin
    if mask.ndim == img.ndim - 1:
        mask = mask[..., None, :, :]
    if img.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"image {img.shape} vs mask {m_bin.shape} size mismatch")
    return img * (1.0 - mask) + fill * mask


def downsample_mask(m, level: int):
    """Nearest-neighbor downsample by 2^(level-1); stride sampling keeps the
    mask binary."""
    if level not in (1, 2, 3, 4):
        raise ContractError(f"level must be in 1..4, got {level}")
    f = 2 ** (level - 1)
    return m[..., ::f, ::f]
