"""Differentiable JPEG compression.

Full pipeline: RGB -> YCbCr, 4:2:0 chroma pooling, 8x8 block DCT, quantization
with the standard tables scaled by the quality factor, a differentiable
rounding surrogate, dequantization, inverse DCT, chroma upsampling, YCbCr ->
RGB. Inputs whose sides are not multiples of 16 are reflect-padded internally
and cropped back, never rejected.

Rounding surrogates: "ste" keeps hard rounding in the forward pass and passes
gradients straight through; "poly" replaces rounding by the smooth
round(x) + (x - round(x))^3, making the whole map differentiable in the
ordinary sense (this is the variant finite-difference checks can probe).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError

QT_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

QT_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def _dct_basis() -> np.ndarray:
    u = np.arange(8)[:, None]
    i = np.arange(8)[None, :]
    c = np.full((8, 1), np.sqrt(2.0 / 8.0))
    c[0, 0] = np.sqrt(1.0 / 8.0)
    return c * np.cos((2 * i + 1) * u * np.pi / 16.0)


_BASIS = _dct_basis()


def scaled_table(table: np.ndarray, qf: float) -> np.ndarray:
    """libjpeg quality scaling of a base quantization table."""
    if qf < 50:
        s = 5000.0 / qf
    else:
        s = 200.0 - 2.0 * qf
    return np.clip(np.floor((table * s + 50.0) / 100.0), 1.0, 255.0)


def diff_round(x: torch.Tensor, mode: str = "ste") -> torch.Tensor:
    r = torch.round(x)
    if mode == "ste":
        return x + (r - x).detach()
    if mode == "poly":
        return r + (x - r) ** 3
    raise ContractError(f"unknown rounding mode {mode!r}")


def rgb_to_ycbcr(rgb: torch.Tensor) -> torch.Tensor:
    """Full-range BT.601 conversion on [0,255] (B,3,H,W) tensors."""
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return torch.stack([y, cb, cr], dim=1)


def ycbcr_to_rgb(ycc: torch.Tensor) -> torch.Tensor:
    y, cb, cr = ycc[:, 0], ycc[:, 1] - 128.0, ycc[:, 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def _blockify(plane: torch.Tensor) -> torch.Tensor:
    b, h, w = plane.shape
    return (
        plane.reshape(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4).reshape(b, -1, 8, 8)
    )


def _unblockify(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b = blocks.shape[0]
    return (
        blocks.reshape(b, h // 8, w // 8, 8, 8).permute(0, 1, 3, 2, 4).reshape(b, h, w)
    )


def _code_plane(plane: torch.Tensor, table: np.ndarray, qf: float, rounding: str) -> torch.Tensor:
    """DCT-quantize-dequantize-IDCT one (B,H,W) plane, dims multiples of 8."""
    basis = torch.as_tensor(_BASIS, dtype=plane.dtype, device=plane.device)
    q = torch.as_tensor(scaled_table(table, qf), dtype=plane.dtype, device=plane.device)
    blocks = _blockify(plane - 128.0)
    coeff = torch.einsum("ui,bnij,vj->bnuv", basis, blocks, basis)
    coeff = diff_round(coeff / q, rounding) * q
    out = torch.einsum("ui,bnuv,vj->bnij", basis, coeff, basis)
    return _unblockify(out, plane.shape[-2], plane.shape[-1]) + 128.0


def diff_jpeg(
    img: torch.Tensor,
    qf: float,
    rounding: str = "ste",
    subsample: bool = True,
) -> torch.Tensor:
    """Differentiable JPEG of a [-1,1] image, (3,H,W) or (B,3,H,W)."""
    if not 10 <= qf <= 100:
        raise ContractError(f"quality factor must be in [10,100], got {qf}")
    squeeze = img.ndim == 3
    x = img.unsqueeze(0) if squeeze else img
    _, _, h, w = x.shape

    mult = 16 if subsample else 8
    pad_h = (-h) % mult
    pad_w = (-w) % mult
    while pad_h or pad_w:
        # reflect padding is capped at dim-1 per call, so very small inputs
        # pad in several steps
        step_h = min(pad_h, x.shape[-2] - 1)
        step_w = min(pad_w, x.shape[-1] - 1)
        x = F.pad(x, (0, step_w, 0, step_h), mode="reflect")
        pad_h -= step_h
        pad_w -= step_w

    ycc = rgb_to_ycbcr((x + 1.0) * 127.5)
    y = _code_plane(ycc[:, 0], QT_LUMA, qf, rounding)
    chroma = ycc[:, 1:]
    if subsample:
        chroma = F.avg_pool2d(chroma, 2)
    cb = _code_plane(chroma[:, 0], QT_CHROMA, qf, rounding)
    cr = _code_plane(chroma[:, 1], QT_CHROMA, qf, rounding)
    chroma = torch.stack([cb, cr], dim=1)
    if subsample:
        chroma = F.interpolate(chroma, scale_factor=2, mode="bilinear", align_corners=False)

    out = ycbcr_to_rgb(torch.cat([y.unsqueeze(1), chroma], dim=1))
    out = (out / 127.5 - 1.0).clamp(-1.0, 1.0)
    out = out[:, :, :h, :w]
    return out.squeeze(0) if squeeze else out
