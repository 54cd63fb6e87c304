"""Image I/O and dataset loading.

Images travel through the pipeline as float tensors in [-1, 1], shape (3, H, W)
or batched (B, 3, H, W). Files are 8-bit; quantization rounds half away from
zero so that saving and reloading through a lossless format (PNG, BMP) changes
no pixel by more than one code value.
"""

from __future__ import annotations

import io
import os
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .config import DatasetConfig
from .errors import ContractError, ShapeError

IMAGE_EXTENSIONS = (".png", ".bmp", ".jpg", ".jpeg")


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """[-1,1] float (3,H,W) -> uint8 (H,W,3), rounding half away from zero."""
    arr = img.detach().cpu().numpy()
    v = (arr + 1.0) * 0.5 * 255.0
    v = np.floor(v + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """uint8 (H,W,3) -> [-1,1] float tensor (3,H,W)."""
    t = torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1))
    return t / 255.0 * 2.0 - 1.0


def save_image(path: str, img: torch.Tensor, quality: int | None = None) -> None:
    """Write a [-1,1] (3,H,W) tensor to disk; format follows the extension."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3,H,W) image, got {tuple(img.shape)}")
    pil = Image.fromarray(to_uint8(img), mode="RGB")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".jpg", ".jpeg"):
        pil.save(path, quality=95 if quality is None else int(quality))
    else:
        pil.save(path)


def load_image(path: str, size: int | None = None) -> torch.Tensor:
    pil = Image.open(path).convert("RGB")
    if size is not None and pil.size != (size, size):
        pil = pil.resize((size, size), Image.BILINEAR)
    return from_uint8(np.asarray(pil))


def save_mask(path: str, mask: torch.Tensor) -> None:
    """Write a binary (H,W) mask as a single-channel PNG with values 0/255."""
    m = mask.detach().cpu().numpy()
    if m.ndim != 2:
        raise ShapeError(f"expected (H,W) mask, got {tuple(m.shape)}")
    Image.fromarray(((m > 0.5) * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path: str) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("L"))
    return torch.from_numpy((arr > 127).astype(np.float32))


def jpeg_roundtrip(img: torch.Tensor, qf: int) -> torch.Tensor:
    """Encode and decode through a real JPEG codec; [-1,1] in and out."""
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(qf))
    buf.seek(0)
    return from_uint8(np.asarray(Image.open(buf).convert("RGB")))


def synth_image(rng: np.random.Generator, size: int = 64) -> torch.Tensor:
    """Toy natural-looking image: smooth noise background plus filled shapes.

    Used by tests and the smoke-run scripts so nothing depends on an external
    photo corpus. Luminance keeps sharp edges while chrominance is smoothed
    and moderately saturated, mimicking camera output. Result is a [-1,1]
    float tensor, (3, size, size).
    """
    from .jpeg import rgb_to_ycbcr, ycbcr_to_rgb

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))
    for c in range(3):
        a, b, p = rng.uniform(0.5, 2.0, 3)
        img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * (a * xx + b * yy) + p)
    coarse = rng.normal(0, 1, (3, size // 8, size // 8))
    up = np.kron(coarse, np.ones((8, 8)))
    for _ in range(3):
        up = (up + np.roll(up, 1, -1) + np.roll(up, -1, -1) + np.roll(up, 1, -2) + np.roll(up, -1, -2)) / 5
    img += 0.15 * up
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        r = rng.uniform(0.08, 0.25) * size
        color = rng.uniform(0.1, 0.9, 3)
        disk = (yy * size - cy) ** 2 + (xx * size - cx) ** 2 < r * r
        for c in range(3):
            img[c][disk] = 0.7 * color[c] + 0.3 * img[c][disk]
    img += rng.normal(0, 0.01, img.shape)
    t = torch.from_numpy(np.clip(img, 0.0, 1.0)).unsqueeze(0) * 255.0
    ycc = rgb_to_ycbcr(t)
    chroma = ycc[:, 1:]
    for _ in range(4):
        chroma = (
            chroma
            + torch.roll(chroma, 1, -1)
            + torch.roll(chroma, -1, -1)
            + torch.roll(chroma, 1, -2)
            + torch.roll(chroma, -1, -2)
        ) / 5
    chroma = 128.0 + 0.7 * (chroma - 128.0)
    rgb = ycbcr_to_rgb(torch.cat([ycc[:, :1], chroma], dim=1)).squeeze(0)
    return (rgb / 127.5 - 1.0).clamp(-1.0, 1.0).float()


def make_synth_batch(seed: int, count: int, size: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.stack([synth_image(rng, size) for _ in range(count)])


@dataclass
class Dataset:
    images: torch.Tensor
    paths: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


def list_images(root: str) -> list[str]:
    names = [n for n in sorted(os.listdir(root)) if n.lower().endswith(IMAGE_EXTENSIONS)]
    return [os.path.join(root, n) for n in names]


def load_dataset(cfg: DatasetConfig) -> Dataset:
    """Load a folder of images in deterministic seeded order.

    Files that fail to decode are skipped with a warning; an empty result is
    an error.
    """
    paths = list_images(cfg.root)
    order = np.random.default_rng(cfg.seed).permutation(len(paths)) if paths else []
    paths = [paths[i] for i in order]
    loaded, kept = [], []
    for p in paths:
        if cfg.limit and len(loaded) >= cfg.limit:
            break
        try:
            loaded.append(load_image(p, cfg.image_size))
            kept.append(p)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {p}: {exc}")
    if not loaded:
        raise ContractError(f"no decodable images found under {cfg.root!r}")
    return Dataset(images=torch.stack(loaded), paths=kept)


def batches(images: torch.Tensor, batch_size: int, rng: np.random.Generator):
    """Yield shuffled batches for one epoch; final short batch included."""
    order = rng.permutation(images.shape[0])
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield images[torch.from_numpy(idx)]
