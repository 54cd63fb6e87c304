"""Evaluation harness.

Runs the full protect-attack-localize-recover chain over a fixed grid of
attack cells (three JPEG qualities, three scaling ratios, three crop
fractions, blur, noise, and a no-attack control) and reports four metrics per
cell: mask BCE, PSNR restricted to tampered pixels, full PSNR, and SSIM.
Evaluation-time JPEG goes through a real codec; everything is seeded so the
emitted CSV is byte-identical across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import apply_tamper, awgn, clone_source, crop_attack, fill_source, gaussian_blur, rescale_roundtrip
from .config import EvalGridConfig, MaskSpec
from .data import jpeg_roundtrip
from .errors import ContractError
from .masks import binarize_otsu, rectify, refine_mask, sample_tamper_mask
from .metrics import bce, local_psnr, psnr, ssim, to_unit
from .models import ImmunizerModel, immunize, recover, verify

# Cell order mirrors the reference report layout.
GRID_CELLS = (
    ("jpeg_qf90", "jpeg", 90),
    ("jpeg_qf70", "jpeg", 70),
    ("jpeg_qf50", "jpeg", 50),
    ("scale_150", "scale", 1.5),
    ("scale_70", "scale", 0.7),
    ("scale_50", "scale", 0.5),
    ("crop_90", "crop", 0.9),
    ("crop_70", "crop", 0.7),
    ("crop_50", "crop", 0.5),
    ("blur", "blur", None),
    ("awgn", "awgn", None),
    ("none", "none", None),
)

METRIC_ROWS = ("bce", "local_psnr", "psnr", "ssim")
TAMPER_MODES_EVAL = ("replace_image", "fill_color", "clone_stamp")


@dataclass
class MetricsReport:
    cells: dict[str, dict[str, float | None]] = field(default_factory=dict)
    extras: dict[str, dict[str, float | None]] = field(default_factory=dict)
    sample_count: int = 0
    config_hash: str = ""

    def to_csv(self) -> str:
        names = [c[0] for c in GRID_CELLS]
        lines = ["index," + ",".join(names)]
        for metric in METRIC_ROWS:
            vals = []
            for name in names:
                v = self.cells[name][metric]
                vals.append("" if v is None else f"{v:.4f}")
            lines.append(metric + "," + ",".join(vals))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "cells": self.cells,
                "extras": self.extras,
                "sample_count": self.sample_count,
                "config_hash": self.config_hash,
            },
            indent=2,
            sort_keys=True,
        )


def _cell_rng(seed: int, cell_index: int, image_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, cell_index, image_index]))


def _sample_eval_mask(rng, grid_cfg, h, w, bands=None) -> np.ndarray:
    spec = grid_cfg.mask_spec
    if bands is not None:
        rst_c, rlt_c = bands
        hw = grid_cfg.strat_halfwidth
        spec = MaskSpec(
            rst_range=(max(rst_c - hw, 0.005), rst_c + hw),
            rlt_range=(max(rlt_c - hw, 0.005), min(rlt_c + hw, rst_c + hw)),
            count_range=spec.count_range,
            shape=spec.shape,
        )
    return sample_tamper_mask(rng, spec, h, w)


def _apply_cell_attack(img: torch.Tensor, kind: str, param, rng, grid_cfg) -> torch.Tensor:
    if kind == "jpeg":
        # real-codec roundtrip works on single images
        return torch.stack([jpeg_roundtrip(im, int(param)) for im in img])
    if kind == "scale":
        return rescale_roundtrip(img, float(param)).clamp(-1.0, 1.0)
    if kind == "blur":
        return gaussian_blur(img, grid_cfg.blur_kernel).clamp(-1.0, 1.0)
    if kind == "awgn":
        return awgn(img, grid_cfg.awgn_sigma, int(rng.integers(0, 2**31 - 1)))
    raise ContractError(f"unknown attack cell kind {kind!r}")


def _eval_one(model, image, donor, cell, cell_index, image_index, grid_cfg, seed, bands):
    """Run the pipeline for one (cell, image) pair; returns metric samples."""
    name, kind, param = cell
    rng = _cell_rng(seed, cell_index, image_index)
    h, w = image.shape[-2:]

    with torch.no_grad():
        i = image.unsqueeze(0)
        i_m, _ = immunize(model, i)

        if kind == "none":
            m_g = torch.zeros(h, w)
            i_a = i_m
        else:
            m_np = _sample_eval_mask(rng, grid_cfg, h, w, bands)
            m_g = torch.from_numpy(m_np)
            mode = TAMPER_MODES_EVAL[int(rng.integers(0, len(TAMPER_MODES_EVAL)))]
            if mode == "replace_image":
                src = donor.unsqueeze(0)
            elif mode == "fill_color":
                src = fill_source(i_m, tuple(rng.uniform(-1.0, 1.0, 3).tolist()))
            else:
                lo, hi = h // 8, h // 2
                shift = tuple(
                    int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
                    for _ in range(2)
                )
                src = clone_source(i_m, shift)
            i_a = apply_tamper(i_m, src, m_g)
            if kind == "crop":
                i_a, crop_mask = crop_attack(i_a, float(param), rng)
                m_g = torch.clamp(m_g + crop_mask.squeeze(0), 0.0, 1.0)
            else:
                i_a = _apply_cell_attack(i_a, kind, param, rng, grid_cfg)

        m_soft = verify(model, i_a)
        m_bin = refine_mask(binarize_otsu(m_soft.squeeze(1)))
        i_v = rectify(i_a, m_bin)
        i_r = recover(model, i_v, m_bin)

    u_i, u_r = to_unit(image), to_unit(i_r.squeeze(0))
    u_v = to_unit(i_v.squeeze(0))
    m2d = m_g.numpy()
    return {
        "bce": bce(m_soft.squeeze(), m_g),
        "local_psnr": local_psnr(u_i, u_r, m2d),
        "psnr": psnr(u_i, u_r),
        "ssim": ssim(u_i, u_r),
        "rectified_local_psnr": local_psnr(u_i, u_v, m2d),
        "immunized_psnr": psnr(u_i, to_unit(i_m.squeeze(0))),
        "mask_fraction": float(m2d.mean()),
    }


def _aggregate(samples: list[dict]) -> tuple[dict, dict]:
    # NaN marks undefined samples (empty mask), inf marks exact equality;
    # both are excluded from means so reports stay finite and strict-JSON
    row: dict[str, float | None] = {}
    extra: dict[str, float | None] = {}
    for key in ("bce", "local_psnr", "psnr", "ssim"):
        vals = [s[key] for s in samples if np.isfinite(s[key])]
        row[key] = float(np.mean(vals)) if vals else None
    for key in ("rectified_local_psnr", "immunized_psnr", "mask_fraction"):
        vals = [s[key] for s in samples if np.isfinite(s[key])]
        extra[key] = float(np.mean(vals)) if vals else None
    return row, extra


def evaluate_grid(
    model: ImmunizerModel,
    images: torch.Tensor,
    grid_cfg: EvalGridConfig,
    config_hash: str = "",
) -> MetricsReport:
    """Mean metrics per attack cell over the first grid_cfg.limit images."""
    grid_cfg.validate()
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractError("evaluation needs a nonempty (B,3,H,W) image set")
    subset = images[: grid_cfg.limit]
    n = subset.shape[0]
    was_training = model.training
    model.eval()
    report = MetricsReport(sample_count=n, config_hash=config_hash)
    for cell_index, cell in enumerate(GRID_CELLS):
        samples = [
            _eval_one(
                model, subset[j], subset[(j + 1) % n], cell, cell_index, j,
                grid_cfg, grid_cfg.seed, bands=None,
            )
            for j in range(n)
        ]
        row, extra = _aggregate(samples)
        report.cells[cell[0]] = row
        report.extras[cell[0]] = extra
    if was_training:
        model.train()
    return report


def evaluate_stratified(
    model: ImmunizerModel,
    images: torch.Tensor,
    grid_cfg: EvalGridConfig,
    config_hash: str = "",
) -> MetricsReport:
    """Recovery metrics keyed by (total, largest-region) tamper-area bands,
    without benign distortion."""
    grid_cfg.validate()
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractError("evaluation needs a nonempty (B,3,H,W) image set")
    subset = images[: grid_cfg.limit]
    n = subset.shape[0]
    was_training = model.training
    model.eval()
    report = MetricsReport(sample_count=n, config_hash=config_hash)
    cell = ("band", "identity-band", None)
    for band_index, band in enumerate(grid_cfg.strat_bands):
        name = f"rst{int(round(band[0] * 100))}_rlt{int(round(band[1] * 100))}"
        samples = []
        for j in range(n):
            rng = _cell_rng(grid_cfg.seed, 100 + band_index, j)
            h, w = subset[j].shape[-2:]
            with torch.no_grad():
                i = subset[j].unsqueeze(0)
                i_m, _ = immunize(model, i)
                m_g = torch.from_numpy(_sample_eval_mask(rng, grid_cfg, h, w, band))
                donor = subset[(j + 1) % n].unsqueeze(0)
                i_a = apply_tamper(i_m, donor, m_g)
                m_soft = verify(model, i_a)
                m_bin = refine_mask(binarize_otsu(m_soft.squeeze(1)))
                i_r = recover(model, rectify(i_a, m_bin), m_bin)
            u_i, u_r = to_unit(subset[j]), to_unit(i_r.squeeze(0))
            samples.append(
                {
                    "bce": bce(m_soft.squeeze(), m_g),
                    "local_psnr": local_psnr(u_i, u_r, m_g.numpy()),
                    "psnr": psnr(u_i, u_r),
                    "ssim": ssim(u_i, u_r),
                    "rectified_local_psnr": local_psnr(u_i, to_unit(rectify(i_a, m_bin).squeeze(0)), m_g.numpy()),
                    "immunized_psnr": psnr(u_i, to_unit(i_m.squeeze(0))),
                    "mask_fraction": float(m_g.numpy().mean()),
                }
            )
        row, extra = _aggregate(samples)
        report.cells[name] = row
        report.extras[name] = extra
    if was_training:
        model.train()
    return report


def stratified_csv(report: MetricsReport) -> str:
    names = list(report.cells.keys())
    lines = ["index," + ",".join(names)]
    for metric in METRIC_ROWS:
        vals = []
        for name in names:
            v = report.cells[name][metric]
            vals.append("" if v is None else f"{v:.4f}")
        lines.append(metric + "," + ",".join(vals))
    return "\n".join(lines) + "\n"
