"""Command line entry points.

Subcommands cover the pipeline end to end: train, immunize, attack, localize,
recover, evaluate. Every command accepts --config (flat JSON run config),
--seed, and --out; each run writes a manifest.json recording the config hash
next to its artifacts. Usage errors exit 2 with usage text, pipeline errors
exit 1 with a diagnostic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import data, training
from .attacks import AttackPlan, apply_benign, apply_tamper, crop_attack, tamper_source
from .checkpoint import load_checkpoint
from .config import RunConfig
from .errors import CheckpointError, ConfigurationError, ContractError, ShapeError, TrainingDiverged
from .evalgrid import evaluate_grid, evaluate_stratified, stratified_csv
from .masks import binarize_otsu, rectify, refine_mask, sample_tamper_mask
from .metrics import psnr, to_unit
from .models import build_models, immunize, recover, verify
from .training import disc_s_layers_for

PIPELINE_ERRORS = (
    CheckpointError,
    ConfigurationError,
    ContractError,
    ShapeError,
    TrainingDiverged,
    OSError,
)


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = RunConfig.from_json(fh.read())
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.dataset.seed = args.seed
        cfg.grid.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _build_model(cfg: RunConfig, ckpt_path: str | None):
    model = build_models(
        base_width=cfg.backbone_base_width, disc_s_layers=disc_s_layers_for(cfg)
    )
    if ckpt_path is not None:
        payload = load_checkpoint(ckpt_path, expected_config_hash=cfg.config_hash())
        model.load_state_dict(payload["model"])
    model.eval()
    return model


def _input_images(args, cfg: RunConfig):
    """Images for a pipeline command: explicit files, a dataset folder, or a
    synthetic batch."""
    if getattr(args, "images", None):
        stems = [os.path.splitext(os.path.basename(p))[0] for p in args.images]
        imgs = torch.stack([data.load_image(p, cfg.dataset.image_size) for p in args.images])
        return imgs, stems
    if getattr(args, "synthetic", None):
        imgs = data.make_synth_batch(cfg.dataset.seed, args.synthetic, cfg.dataset.image_size)
        return imgs, [f"synth_{i:03d}" for i in range(args.synthetic)]
    if cfg.dataset.root:
        ds = data.load_dataset(cfg.dataset)
        stems = [os.path.splitext(os.path.basename(p))[0] for p in ds.paths]
        return ds.images, stems
    raise ContractError("no input images: pass --images, --synthetic N, or a dataset root")


def _write_manifest(out_dir: str, cfg: RunConfig, command: str, artifacts: list[str]) -> None:
    doc = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "artifacts": sorted(os.path.basename(a) for a in artifacts),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if getattr(args, "synthetic", None):
        images = data.make_synth_batch(cfg.dataset.seed, args.synthetic, cfg.dataset.image_size)
    else:
        images = data.load_dataset(cfg.dataset).images
    result = training.train(cfg, images, resume_from=args.resume)
    _write_manifest(
        cfg.out_dir, cfg, "train", [result["log"]] + list(result["checkpoints"])
    )
    print(f"trained {result['steps']} steps, log at {result['log']}")
    return 0


def cmd_immunize(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    model = _build_model(cfg, args.model)
    images, stems = _input_images(args, cfg)
    artifacts = []
    with torch.no_grad():
        i_m, r = immunize(model, images)
    for j, stem in enumerate(stems):
        p_img = os.path.join(out, f"{stem}_immunized.png")
        data.save_image(p_img, i_m[j])
        # residual is tiny by design; stretch to full range for display
        res = r[j]
        scale = float(res.abs().max())
        vis = res / scale if scale > 0 else res
        p_res = os.path.join(out, f"{stem}_residual.png")
        data.save_image(p_res, vis)
        artifacts += [p_img, p_res]
        print(f"{stem}: immunized PSNR {psnr(to_unit(images[j]), to_unit(i_m[j])):.2f} dB")
    _write_manifest(out, cfg, "immunize", artifacts)
    return 0


def cmd_attack(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    images, stems = _input_images(args, cfg)
    rng = np.random.default_rng(cfg.grid.seed)
    artifacts = []
    for j, stem in enumerate(stems):
        img = images[j].unsqueeze(0)
        h, w = img.shape[-2:]
        if args.tamper == "none":
            m_g = torch.zeros(h, w)
            i_a = img
        else:
            m_g = torch.from_numpy(sample_tamper_mask(rng, cfg.mask, h, w))
            tamper_params = {}
            if args.tamper == "fill_color":
                tamper_params["fill"] = tuple(rng.uniform(-1.0, 1.0, 3).tolist())
            elif args.tamper == "clone_stamp":
                lo = max(1, h // 8)
                tamper_params["shift"] = tuple(
                    int(rng.integers(lo, h // 2 + 1)) * (1 if rng.random() < 0.5 else -1)
                    for _ in range(2)
                )
            plan = AttackPlan(tamper=args.tamper, benign="identity", params=tamper_params)
            donor = images[(j + 1) % len(stems)].unsqueeze(0)
            src = tamper_source(img, plan, donor=donor if args.tamper == "replace_image" else None)
            i_a = apply_tamper(img, src, m_g)
        if args.kind == "crop":
            i_a, crop_mask = crop_attack(i_a, args.ratio, rng)
            m_g = torch.clamp(m_g + crop_mask.squeeze(0), 0.0, 1.0)
        elif args.kind == "jpeg":
            # the artifact itself is the JPEG file, so the codec does the work
            pass
        elif args.kind != "identity":
            benign_params = {"sigma": args.sigma, "kernel": args.kernel, "ratio": args.ratio}
            plan = AttackPlan(
                tamper="none",
                benign=args.kind,
                params=benign_params,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
            i_a = apply_benign(i_a, plan).clamp(-1.0, 1.0)
        ext = ".jpg" if args.kind == "jpeg" else ".png"
        p_img = os.path.join(out, f"{stem}_attacked{ext}")
        data.save_image(p_img, i_a.squeeze(0), quality=args.qf if args.kind == "jpeg" else None)
        p_mask = os.path.join(out, f"{stem}_mask.png")
        data.save_mask(p_mask, m_g)
        artifacts += [p_img, p_mask]
    _write_manifest(out, cfg, "attack", artifacts)
    print(f"wrote {len(artifacts)} files to {out}")
    return 0


def cmd_localize(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    model = _build_model(cfg, args.model)
    images, stems = _input_images(args, cfg)
    artifacts = []
    with torch.no_grad():
        m_soft = verify(model, images)
    m_ref = refine_mask(binarize_otsu(m_soft.squeeze(1)))
    for j, stem in enumerate(stems):
        p_soft = os.path.join(out, f"{stem}_soft.png")
        data.save_image(p_soft, (m_soft[j] * 2.0 - 1.0).expand(3, -1, -1))
        p_ref = os.path.join(out, f"{stem}_refined.png")
        data.save_mask(p_ref, m_ref[j])
        artifacts += [p_soft, p_ref]
    _write_manifest(out, cfg, "localize", artifacts)
    print(f"wrote {len(artifacts)} files to {out}")
    return 0


def cmd_recover(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    model = _build_model(cfg, args.model)
    images, stems = _input_images(args, cfg)
    if args.masks:
        if len(args.masks) != len(stems):
            raise ContractError(
                f"{len(args.masks)} masks for {len(stems)} images"
            )
        m_bin = torch.stack([data.load_mask(p) for p in args.masks])
    else:
        with torch.no_grad():
            m_bin = refine_mask(binarize_otsu(verify(model, images).squeeze(1)))
    artifacts = []
    with torch.no_grad():
        i_v = rectify(images, m_bin)
        i_r = recover(model, i_v, m_bin)
    for j, stem in enumerate(stems):
        p_v = os.path.join(out, f"{stem}_rectified.png")
        data.save_image(p_v, i_v[j])
        p_r = os.path.join(out, f"{stem}_recovered.png")
        data.save_image(p_r, i_r[j])
        artifacts += [p_v, p_r]
        print(f"{stem}: recovered PSNR vs input {psnr(to_unit(images[j]), to_unit(i_r[j])):.2f} dB")
    _write_manifest(out, cfg, "recover", artifacts)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    model = _build_model(cfg, args.model)
    images, _ = _input_images(args, cfg)
    report = evaluate_grid(model, images, cfg.grid, config_hash=cfg.config_hash())
    p_csv = os.path.join(out, "metrics.csv")
    with open(p_csv, "w", newline="") as fh:
        fh.write(report.to_csv())
    p_json = os.path.join(out, "metrics.json")
    with open(p_json, "w") as fh:
        fh.write(report.to_json())
    artifacts = [p_csv, p_json]
    if cfg.grid.stratified:
        strat = evaluate_stratified(model, images, cfg.grid, config_hash=cfg.config_hash())
        p_strat = os.path.join(out, "stratified.csv")
        with open(p_strat, "w", newline="") as fh:
            fh.write(stratified_csv(strat))
        artifacts.append(p_strat)
    _write_manifest(out, cfg, "evaluate", artifacts)
    print(report.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imshield",
        description="Image immunization: protect, attack, localize, recover, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, inputs=False):
        p.add_argument("--config", help="flat JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seeds")
        p.add_argument("--out", help="output directory")
        if model:
            p.add_argument("--model", help="checkpoint file with trained weights")
        if inputs:
            p.add_argument("--images", nargs="+", help="input image files")
            p.add_argument("--synthetic", type=int, help="use N synthetic images")

    p = sub.add_parser("train", help="run the training schedule")
    common(p)
    p.add_argument("--synthetic", type=int, help="train on N synthetic images")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("immunize", help="write protected images and residuals")
    common(p, model=True, inputs=True)
    p.set_defaults(func=cmd_immunize)

    p = sub.add_parser("attack", help="tamper and distort images, write ground truth")
    common(p, inputs=True)
    p.add_argument(
        "--kind",
        default="identity",
        choices=["identity", "jpeg", "blur", "awgn", "rescale", "crop"],
        help="benign distortion to apply",
    )
    p.add_argument(
        "--tamper",
        default="replace_image",
        choices=["replace_image", "fill_color", "clone_stamp", "none"],
    )
    p.add_argument("--qf", type=int, default=70, help="JPEG quality factor")
    p.add_argument("--sigma", type=float, default=0.1, help="noise std")
    p.add_argument("--kernel", type=int, default=5, help="blur kernel size")
    p.add_argument("--ratio", type=float, default=0.7, help="rescale ratio / crop keep fraction")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("localize", help="predict soft and refined tamper masks")
    common(p, model=True, inputs=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("recover", help="rectify and repaint tampered images")
    common(p, model=True, inputs=True)
    p.add_argument("--masks", nargs="+", help="binary mask files (else the model localizes)")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("evaluate", help="run the attack grid and write metric reports")
    common(p, model=True, inputs=True)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help; pass both through
        return int(e.code or 0)
    try:
        return args.func(args)
    except PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
