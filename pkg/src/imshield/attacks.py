"""Attack simulation layer.

Combines a malicious tamper (foreign content pasted under a binary mask) with
one benign distortion (noise, blur, rescaling, JPEG, or nothing). Tampering is
exact pixel selection, never interpolation, and always happens before the
benign distortion. All distortions are differentiable with respect to the
image so gradients can flow back into the protecting encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import AttackConfig
from .errors import ConfigurationError, ContractError, ShapeError
from .jpeg import diff_jpeg


@dataclass
class AttackPlan:
    """One sampled attack: what to paste, what to distort with, and how."""

    tamper: str = "none"  # replace_image | fill_color | clone_stamp | none
    benign: str = "identity"  # awgn | blur | rescale | jpeg | crop | identity
    params: dict = field(default_factory=dict)
    seed: int = 0


def _as_mask_nchw(mask: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    m = mask
    if m.ndim == 2:
        m = m.unsqueeze(0)
    if m.ndim == 3 and img.ndim == 4:
        m = m.unsqueeze(1) if m.shape[0] == img.shape[0] else m.unsqueeze(0)
    if m.shape[-2:] != img.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match image {tuple(img.shape)}")
    return m.to(img.dtype)


def apply_tamper(
    i_m: torch.Tensor, i_irr: torch.Tensor, m_r: torch.Tensor, mode: str = ""
) -> torch.Tensor:
    """Paste foreign content where the mask is 1, keep the image elsewhere."""
    if i_irr.shape != i_m.shape:
        raise ShapeError(
            f"source {tuple(i_irr.shape)} does not match image {tuple(i_m.shape)}"
        )
    vals = torch.unique(m_r.detach())
    if not bool(((vals == 0) | (vals == 1)).all()):
        raise ContractError("tamper mask must be binary")
    m = _as_mask_nchw(m_r, i_m)
    return i_irr * m + i_m * (1.0 - m)


def clone_source(img: torch.Tensor, shift: tuple[int, int]) -> torch.Tensor:
    """Circularly shifted copy of the image itself (clone-stamp donor)."""
    return torch.roll(img, shifts=tuple(int(s) for s in shift), dims=(-2, -1))


def fill_source(img: torch.Tensor, color) -> torch.Tensor:
    c = torch.as_tensor(color, dtype=img.dtype, device=img.device)
    if c.numel() != img.shape[-3]:
        raise ShapeError(f"fill color has {c.numel()} channels, image {img.shape[-3]}")
    shape = [1] * img.ndim
    shape[-3] = img.shape[-3]
    return c.reshape(shape).expand_as(img).clone()


def replace_source(batch: torch.Tensor) -> torch.Tensor:
    """Donor images for replace-tampering: each image gets its batch neighbor."""
    if batch.ndim != 4:
        raise ShapeError(f"expected (B,3,H,W) batch, got {tuple(batch.shape)}")
    return torch.roll(batch, shifts=1, dims=0)


def tamper_source(img: torch.Tensor, plan: AttackPlan, donor: torch.Tensor | None = None) -> torch.Tensor:
    if plan.tamper == "replace_image":
        if donor is None:
            donor = replace_source(img if img.ndim == 4 else img.unsqueeze(0)).reshape(img.shape)
        if donor.shape != img.shape:
            raise ShapeError("donor shape mismatch")
        return donor
    if plan.tamper == "fill_color":
        return fill_source(img, plan.params["fill"])
    if plan.tamper == "clone_stamp":
        return clone_source(img, plan.params["shift"])
    raise ContractError(f"unknown tamper mode {plan.tamper!r}")


def gaussian_kernel1d(k: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(k, dtype=dtype) - (k - 1) / 2.0
    w = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(img: torch.Tensor, k: int, sigma: float | None = None) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding, sigma defaults to k/3."""
    if sigma is None:
        sigma = k / 3.0
    squeeze = img.ndim == 3
    x = img.unsqueeze(0) if squeeze else img
    c = x.shape[1]
    w = gaussian_kernel1d(k, sigma, dtype=x.dtype).to(x.device)
    pad = k // 2
    x = F.pad(x, (pad, k - 1 - pad, 0, 0), mode="reflect")
    x = F.conv2d(x, w.reshape(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    x = F.pad(x, (0, 0, pad, k - 1 - pad), mode="reflect")
    x = F.conv2d(x, w.reshape(1, 1, k, 1).expand(c, 1, k, 1), groups=c)
    return x.squeeze(0) if squeeze else x


def rescale_roundtrip(img: torch.Tensor, ratio: float) -> torch.Tensor:
    """Bilinear resize by ratio and back to the original size."""
    squeeze = img.ndim == 3
    x = img.unsqueeze(0) if squeeze else img
    h, w = x.shape[-2:]
    nh, nw = max(1, round(h * ratio)), max(1, round(w * ratio))
    x = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return x.squeeze(0) if squeeze else x


def awgn(img: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(img.shape, generator=gen, dtype=img.dtype).to(img.device)
    return (img + sigma * noise).clamp(-1.0, 1.0)


def crop_attack(
    img: torch.Tensor, keep_fraction: float, rng: np.random.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep a random window of the given area fraction, gray out the rest.

    Returns the cropped-in-place image and a mask marking the discarded
    border as tampered. keep_fraction = 1 keeps the image unchanged.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractError(f"keep_fraction must be in (0,1], got {keep_fraction}")
    h, w = img.shape[-2:]
    mask_shape = (img.shape[0], h, w) if img.ndim == 4 else (h, w)
    if keep_fraction == 1.0:
        return img, torch.zeros(mask_shape, dtype=img.dtype, device=img.device)
    if rng is None:
        rng = np.random.default_rng()
    kh = min(h, max(1, round(h * keep_fraction**0.5)))
    kw = min(w, max(1, round(keep_fraction * h * w / kh)))
    top = int(rng.integers(0, h - kh + 1))
    left = int(rng.integers(0, w - kw + 1))
    mask = torch.ones(mask_shape, dtype=img.dtype, device=img.device)
    mask[..., top : top + kh, left : left + kw] = 0.0
    m = _as_mask_nchw(mask, img) if img.ndim == 4 else mask
    return img * (1.0 - m), mask


def apply_benign(img: torch.Tensor, plan: AttackPlan) -> torch.Tensor:
    """Apply the plan's benign distortion; output stays in [-1,1]."""
    kind = plan.benign
    if kind == "identity":
        return img
    if kind == "awgn":
        return awgn(img, plan.params["sigma"], plan.seed)
    if kind == "blur":
        return gaussian_blur(img, plan.params["kernel"]).clamp(-1.0, 1.0)
    if kind == "rescale":
        return rescale_roundtrip(img, plan.params["ratio"]).clamp(-1.0, 1.0)
    if kind == "jpeg":
        return diff_jpeg(img, plan.params["qf"], rounding=plan.params.get("rounding", "ste"))
    if kind == "crop":
        rng = np.random.default_rng(plan.seed)
        return crop_attack(img, plan.params["keep"], rng)[0]
    raise ContractError(f"unknown benign kind {kind!r}")


def sample_attack_plan(
    rng: np.random.Generator, cfg: AttackConfig, image_size: int
) -> AttackPlan:
    """Draw one attack uniformly over the enabled tampers and distortions.

    With probability p_skip the whole layer is skipped: no tamper, identity
    distortion, and the caller must use an all-zero ground-truth mask.
    """
    if not cfg.benign_kinds:
        raise ConfigurationError("no benign kinds enabled")
    if not cfg.tamper_modes:
        raise ConfigurationError("no tamper modes enabled")
    seed = int(rng.integers(0, 2**31 - 1))
    if rng.random() < cfg.p_skip:
        return AttackPlan(tamper="none", benign="identity", seed=seed)
    tamper = str(rng.choice(list(cfg.tamper_modes)))
    benign = str(rng.choice(list(cfg.benign_kinds)))
    params: dict = {}
    if tamper == "fill_color":
        params["fill"] = tuple(rng.uniform(-1.0, 1.0, 3).tolist())
    elif tamper == "clone_stamp":
        lo, hi = image_size // 8, image_size // 2
        shift = []
        for _ in range(2):
            mag = int(rng.integers(lo, hi + 1))
            shift.append(mag if rng.random() < 0.5 else -mag)
        params["shift"] = tuple(shift)
    if benign == "awgn":
        params["sigma"] = cfg.awgn_sigma
    elif benign == "blur":
        params["kernel"] = int(rng.choice(list(cfg.blur_kernels)))
    elif benign == "rescale":
        params["ratio"] = float(rng.uniform(*cfg.scale_range))
    elif benign == "jpeg":
        params["qf"] = int(rng.integers(cfg.jpeg_qf_range[0], cfg.jpeg_qf_range[1] + 1))
        params["rounding"] = cfg.rounding
    return AttackPlan(tamper=tamper, benign=benign, params=params, seed=seed)


def execute_plan(
    img: torch.Tensor,
    mask: torch.Tensor,
    plan: AttackPlan,
    donor: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run one full attack: tamper first, then the benign distortion.

    Returns the attacked image and the effective ground-truth tamper mask
    (all zeros when the plan skips tampering).
    """
    if plan.tamper == "none":
        out_mask = torch.zeros_like(mask)
        attacked = img
    else:
        out_mask = mask
        attacked = apply_tamper(img, tamper_source(img, plan, donor), mask, plan.tamper)
    attacked = apply_benign(attacked, plan)
    return attacked, out_mask
