"""Run the attack-grid evaluation for a trained checkpoint and write the
metric reports (metrics.csv / metrics.json, optionally stratified.csv).

Example:
    python scripts/run_eval_grid.py --model runs/smoke/ckpt_final.pt \
        --out runs/smoke/eval --limit 8 --stratified
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import torch

from imshield.checkpoint import load_checkpoint
from imshield.config import RunConfig
from imshield.data import load_dataset, make_synth_batch
from imshield.evalgrid import evaluate_grid, evaluate_stratified, stratified_csv
from imshield.models import build_models
from imshield.training import disc_s_layers_for


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True, help="checkpoint file")
    ap.add_argument("--config", help="flat JSON run config (defaults used if omitted)")
    ap.add_argument("--out", default="eval")
    ap.add_argument("--images", help="dataset folder; synthetic batch if omitted")
    ap.add_argument("--limit", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stratified", action="store_true")
    args = ap.parse_args()

    if args.config:
        with open(args.config) as fh:
            cfg = RunConfig.from_json(fh.read())
    else:
        # mirror the train_smoke defaults so its checkpoints load as-is
        cfg = RunConfig()
        cfg.dataset.image_size = 64
        cfg.backbone_base_width = 8
        cfg.train.epochs_per_progressive_phase = 0
        cfg.train.decoupling_lift_epoch = 100
    cfg.grid.limit = args.limit
    cfg.grid.seed = args.seed

    model = build_models(
        base_width=cfg.backbone_base_width, disc_s_layers=disc_s_layers_for(cfg)
    )
    model.load_state_dict(load_checkpoint(args.model)["model"])
    model.eval()

    if args.images:
        cfg.dataset.root = args.images
        images = load_dataset(cfg.dataset).images
    else:
        images = make_synth_batch(cfg.dataset.seed, args.limit, cfg.dataset.image_size)

    os.makedirs(args.out, exist_ok=True)
    report = evaluate_grid(model, images, cfg.grid, config_hash=cfg.config_hash())
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    print(report.to_csv())
    if args.stratified:
        strat = evaluate_stratified(model, images, cfg.grid, config_hash=cfg.config_hash())
        with open(os.path.join(args.out, "stratified.csv"), "w", newline="") as fh:
            fh.write(stratified_csv(strat))
        print(stratified_csv(strat))


if __name__ == "__main__":
    main()
