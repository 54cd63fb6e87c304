"""Training orchestrator.

Schedule: recovery starts at 1/8 resolution and grows a level each phase with
smooth fade-in; the verifier sits idle until full resolution. While training
is decoupled, the verifier learns mask prediction on its own optimizer and
the decoder is fed ground-truth rectified images; after the lift (a fixed
epoch or once the classification loss plateaus, whichever first) the whole
chain trains in one go, with predicted masks driving rectification.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import optim

from .attacks import execute_plan, sample_attack_plan
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .errors import CheckpointError, ContractError, TrainingDiverged
from .losses import (
    LossReport,
    combine,
    loss_adv_discriminator,
    loss_adv_generator,
    loss_cls,
    loss_fidelity,
    loss_recovery,
)
from .masks import binarize_otsu, downsample_mask, rectify, refine_mask, sample_tamper_mask
from .models import (
    ImmunizerModel,
    build_models,
    discriminate,
    immunize,
    recover,
    recover_progressive,
    verify,
)

LOG_FIELDS = [
    "step", "epoch", "stage", "fade", "decoupled",
    "l_cls", "l_r", "l_c", "l_dr", "l_dc", "l_total", "d_c", "d_s",
]


@dataclass
class PhaseState:
    """Position in the training schedule."""

    stage: int = 4
    fade: float = 1.0
    decoupled: bool = True
    epoch: int = 0
    step: int = 0

    @property
    def verifier_active(self) -> bool:
        return self.stage == 4


def phase_for_epoch(epoch: int, cfg: TrainConfig) -> PhaseState:
    """Pure schedule lookup; progressive stage, fade weight, decoupling flag."""
    if not 0 <= epoch < cfg.epochs_total:
        raise ContractError(f"epoch {epoch} outside [0,{cfg.epochs_total})")
    decoupled = epoch < cfg.decoupling_lift_epoch
    epp = cfg.epochs_per_progressive_phase
    if epp == 0:
        return PhaseState(stage=4, fade=1.0, decoupled=decoupled, epoch=epoch)
    stage = min(4, 1 + epoch // epp)
    if stage == 1:
        fade = 1.0
    else:
        pos = epoch - (stage - 1) * epp
        fade_epochs = cfg.fade_fraction * epp
        fade = 1.0 if fade_epochs == 0 else min(1.0, pos / fade_epochs)
    return PhaseState(stage=stage, fade=fade, decoupled=decoupled, epoch=epoch)


class LiftMonitor:
    """Plateau detector for the early decoupling lift.

    Tracks a moving average of the classification loss over fixed-size step
    windows; reports convergence after `patience` consecutive windows whose
    relative improvement falls below `min_improvement`. patience <= 0
    disables the monitor.
    """

    def __init__(self, window: int, patience: int, min_improvement: float):
        self.window = max(1, window)
        self.patience = patience
        self.min_improvement = min_improvement
        self.buffer: list[float] = []
        self.prev_avg: float | None = None
        self.flat_windows = 0

    def push(self, value: float) -> None:
        if self.patience <= 0:
            return
        self.buffer.append(value)
        if len(self.buffer) < self.window:
            return
        avg = float(np.mean(self.buffer))
        self.buffer = []
        if self.prev_avg is not None:
            gain = (self.prev_avg - avg) / max(abs(self.prev_avg), 1e-12)
            self.flat_windows = self.flat_windows + 1 if gain < self.min_improvement else 0
        self.prev_avg = avg

    @property
    def converged(self) -> bool:
        return self.patience > 0 and self.flat_windows >= self.patience

    def state(self) -> dict:
        return {
            "buffer": list(self.buffer),
            "prev_avg": self.prev_avg,
            "flat_windows": self.flat_windows,
        }

    def load_state(self, state: dict) -> None:
        self.buffer = list(state["buffer"])
        self.prev_avg = state["prev_avg"]
        self.flat_windows = int(state["flat_windows"])


class Optimizers:
    """One optimizer per trainable role; the verifier is always separate so
    decoupled updates never share moment state with the generator."""

    def __init__(self, model: ImmunizerModel, cfg: TrainConfig):
        lr, betas = cfg.learning_rate, cfg.adam_betas
        gen_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
        self.gen = optim.Adam(gen_params, lr=lr, betas=betas)
        self.verifier = optim.Adam(model.verifier.parameters(), lr=lr, betas=betas)
        self.disc_c = optim.Adam(model.disc_c.parameters(), lr=lr, betas=betas)
        self.disc_s = optim.Adam(model.disc_s.parameters(), lr=lr, betas=betas)

    def state_dicts(self) -> dict:
        return {
            "gen": self.gen.state_dict(),
            "verifier": self.verifier.state_dict(),
            "disc_c": self.disc_c.state_dict(),
            "disc_s": self.disc_s.state_dict(),
        }

    def load_state_dicts(self, state: dict) -> None:
        self.gen.load_state_dict(state["gen"])
        self.verifier.load_state_dict(state["verifier"])
        self.disc_c.load_state_dict(state["disc_c"])
        self.disc_s.load_state_dict(state["disc_s"])


def sample_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Deterministic per-(step, sample) stream, independent of batch order."""
    return np.random.default_rng(np.random.SeedSequence([seed, step, index]))


def prepare_attack_batch(i_m: torch.Tensor, run_cfg: RunConfig, step: int):
    """Sample per-image masks and attack plans, then execute them.

    Returns the attacked batch, the effective ground-truth masks (zeros for
    skipped plans), and the plans themselves.
    """
    b, _, h, w = i_m.shape
    attacked, masks, plans = [], [], []
    for idx in range(b):
        rng = sample_rng(run_cfg.train.seed, step, idx)
        plan = sample_attack_plan(rng, run_cfg.attack, min(h, w))
        mask = torch.from_numpy(sample_tamper_mask(rng, run_cfg.mask, h, w)).to(i_m.dtype)
        donor = i_m[(idx + 1) % b] if plan.tamper == "replace_image" else None
        img_a, m_eff = execute_plan(i_m[idx], mask, plan, donor=donor)
        attacked.append(img_a)
        masks.append(m_eff)
        plans.append(plan)
    return torch.stack(attacked), torch.stack(masks), plans


def _stage_factor(stage: int) -> int:
    return 2 ** (4 - stage)


def _downsample_image(img: torch.Tensor, factor: int) -> torch.Tensor:
    return img if factor == 1 else torch.nn.functional.avg_pool2d(img, factor)


def _disc_step(opt, disc, fake: torch.Tensor, real: torch.Tensor) -> float:
    opt.zero_grad(set_to_none=True)
    loss = loss_adv_discriminator(discriminate(disc, real), discriminate(disc, fake.detach()))
    loss.backward()
    opt.step()
    return float(loss.detach())


def step_decoupled(
    model: ImmunizerModel,
    opts: Optimizers,
    batch: torch.Tensor,
    run_cfg: RunConfig,
    phase: PhaseState,
):
    """One decoupled step: verifier and generator updated independently.

    The verifier (full-resolution phases only) fits masks on detached attacked
    images; the encoder/decoder chain trains with ground-truth rectification,
    so predicted masks never influence recovery here.
    """
    if not phase.decoupled:
        raise ContractError("step_decoupled called in a coupled phase")
    weights = run_cfg.train.weights
    i = batch
    i_m, _ = immunize(model, i)
    i_a, m_g, plans = prepare_attack_batch(i_m, run_cfg, phase.step)

    l_cls_val = 0.0
    if phase.verifier_active:
        m_soft = verify(model, i_a.detach())
        l_cls = loss_cls(m_soft, m_g.unsqueeze(1))
        opts.verifier.zero_grad(set_to_none=True)
        l_cls.backward()
        opts.verifier.step()
        l_cls_val = float(l_cls.detach())

    factor = _stage_factor(phase.stage)
    m_low = downsample_mask(m_g, 5 - phase.stage)
    i_low = _downsample_image(i, factor)
    i_v_low = rectify(_downsample_image(i_a, factor), m_low)
    if phase.stage == 4:
        i_r = recover(model, i_v_low, m_low)
    else:
        i_r = recover_progressive(model, i_v_low, m_low, phase.stage, phase.fade)
    l_r = loss_recovery(i_low, i_r, m_low)
    l_c = loss_fidelity(i, i_m)
    l_dc = loss_adv_generator(discriminate(model.disc_c, i_m))
    l_dr = loss_adv_generator(discriminate(model.disc_s, i_r))
    total = combine(l_r, l_c, 0.0, l_dr, l_dc, weights, decoupled=True)
    opts.gen.zero_grad(set_to_none=True)
    total.backward()
    opts.gen.step()
    report = LossReport(
        l_cls=l_cls_val, l_r=float(l_r.detach()), l_c=float(l_c.detach()),
        l_dr=float(l_dr.detach()), l_dc=float(l_dc.detach()), l_total=float(total.detach()),
    )

    d_c = _disc_step(opts.disc_c, model.disc_c, i_m, i)
    d_s = _disc_step(opts.disc_s, model.disc_s, i_r, i_low)
    return report, d_c, d_s


def step_coupled(
    model: ImmunizerModel,
    opts: Optimizers,
    batch: torch.Tensor,
    run_cfg: RunConfig,
    phase: PhaseState,
):
    """One coupled step: the full protect-attack-verify-rectify-recover chain
    trained in one go, with rectification driven by refined predicted masks."""
    if phase.decoupled:
        raise ContractError("step_coupled called in a decoupled phase")
    weights = run_cfg.train.weights
    i = batch
    i_m, _ = immunize(model, i)
    i_a, m_g, plans = prepare_attack_batch(i_m, run_cfg, phase.step)

    m_soft = verify(model, i_a)
    l_cls = loss_cls(m_soft, m_g.unsqueeze(1))
    m_bin = refine_mask(binarize_otsu(m_soft.squeeze(1).detach()))
    i_v = rectify(i_a, m_bin)
    i_r = recover(model, i_v, m_bin)
    l_r = loss_recovery(i, i_r, m_g)
    l_c = loss_fidelity(i, i_m)
    l_dc = loss_adv_generator(discriminate(model.disc_c, i_m))
    l_dr = loss_adv_generator(discriminate(model.disc_s, i_r))
    total = combine(l_r, l_c, l_cls, l_dr, l_dc, weights, decoupled=False)
    opts.gen.zero_grad(set_to_none=True)
    opts.verifier.zero_grad(set_to_none=True)
    total.backward()
    opts.gen.step()
    opts.verifier.step()
    report = LossReport(
        l_cls=float(l_cls.detach()), l_r=float(l_r.detach()), l_c=float(l_c.detach()),
        l_dr=float(l_dr.detach()), l_dc=float(l_dc.detach()), l_total=float(total.detach()),
    )

    d_c = _disc_step(opts.disc_c, model.disc_c, i_m, i)
    d_s = _disc_step(opts.disc_s, model.disc_s, i_r, i)
    return report, d_c, d_s


def _check_finite(report: LossReport, step: int) -> None:
    parts = asdict(report)
    bad = [k for k, v in parts.items() if not np.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite loss parts {bad} at step {step}: {parts}")


def disc_s_layers_for(run_cfg: RunConfig) -> int:
    """Depth of the recovery critic, kept shallow enough for the smallest
    progressive-stage resolution it will ever see."""
    size = run_cfg.dataset.image_size
    if run_cfg.train.epochs_per_progressive_phase > 0:
        size //= 8
    return max(1, min(3, int(np.log2(size)) - 2))


def build_training(run_cfg: RunConfig):
    torch.manual_seed(run_cfg.train.seed)
    model = build_models(
        base_width=run_cfg.backbone_base_width,
        disc_s_layers=disc_s_layers_for(run_cfg),
    )
    opts = Optimizers(model, run_cfg.train)
    return model, opts


def _model_state(model: ImmunizerModel) -> dict:
    return {k: v.detach().cpu() for k, v in model.state_dict().items()}


def train(
    run_cfg: RunConfig,
    images: torch.Tensor,
    resume_from: str | None = None,
    log_name: str = "train_log.csv",
    stop_after_epoch: int | None = None,
) -> dict:
    """Run the schedule over an in-memory image set; returns artifact paths.

    Writes a CSV log row per step and digest-protected checkpoints at phase
    boundaries and every checkpoint_every steps. Training resumes from a
    checkpoint with the identical subsequent schedule. stop_after_epoch is an
    operational interrupt (complete that many epochs, checkpoint, return); it
    is not part of the configuration, so a resumed run hashes identically.
    """
    run_cfg.validate()
    cfg = run_cfg.train
    os.makedirs(run_cfg.out_dir, exist_ok=True)
    log_path = os.path.join(run_cfg.out_dir, log_name)
    model, opts = build_training(run_cfg)
    monitor = LiftMonitor(cfg.lift_window, cfg.lift_patience, cfg.lift_min_improvement)
    start_epoch, global_step, lifted = 0, 0, False

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload.get("config_hash") != run_cfg.config_hash():
            raise CheckpointError(
                "refusing to resume: checkpoint was written under a different configuration"
            )
        model.load_state_dict(payload["model"])
        opts.load_state_dicts(payload["optimizers"])
        monitor.load_state(payload["monitor"])
        start_epoch = int(payload["phase"]["epoch"]) + 1
        global_step = int(payload["phase"]["step"])
        lifted = bool(payload["lifted"])

    def save(path_name: str, phase: PhaseState) -> str:
        payload = {
            "model": _model_state(model),
            "optimizers": opts.state_dicts(),
            "phase": {"stage": phase.stage, "fade": phase.fade,
                      "decoupled": phase.decoupled, "epoch": phase.epoch, "step": phase.step},
            "monitor": monitor.state(),
            "lifted": lifted,
            "config_hash": run_cfg.config_hash(),
        }
        path = os.path.join(run_cfg.out_dir, path_name)
        save_checkpoint(path, payload)
        return path

    checkpoints: list[str] = []
    mode = "a" if resume_from is not None and os.path.exists(log_path) else "w"
    stop = False
    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if mode == "w":
            writer.writeheader()
        prev_stage = None
        epoch = max(start_epoch - 1, 0)
        for epoch in range(start_epoch, cfg.epochs_total):
            phase = phase_for_epoch(epoch, cfg)
            if lifted:
                phase.decoupled = False
            if prev_stage is not None and phase.stage != prev_stage:
                checkpoints.append(save(f"ckpt_stage{prev_stage}.pt", phase))
            prev_stage = phase.stage
            epoch_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 1_000_000 + epoch])
            )
            order = epoch_rng.permutation(images.shape[0])
            for start in range(0, len(order), cfg.batch_size):
                batch = images[torch.from_numpy(order[start : start + cfg.batch_size])]
                phase.step = global_step
                if phase.decoupled:
                    report, d_c, d_s = step_decoupled(model, opts, batch, run_cfg, phase)
                    if phase.verifier_active:
                        monitor.push(report.l_cls)
                        if monitor.converged and not lifted:
                            lifted = True
                            phase.decoupled = False
                else:
                    report, d_c, d_s = step_coupled(model, opts, batch, run_cfg, phase)
                _check_finite(report, global_step)
                row = {
                    "step": global_step, "epoch": epoch, "stage": phase.stage,
                    "fade": f"{phase.fade:.4f}", "decoupled": int(phase.decoupled),
                    "d_c": f"{d_c:.6f}", "d_s": f"{d_s:.6f}",
                }
                for k in ("l_cls", "l_r", "l_c", "l_dr", "l_dc", "l_total"):
                    row[k] = f"{getattr(report, k):.6f}"
                writer.writerow(row)
                global_step += 1
                if cfg.checkpoint_every and global_step % cfg.checkpoint_every == 0:
                    checkpoints.append(save(f"ckpt_step{global_step}.pt", phase))
                if cfg.max_steps and global_step >= cfg.max_steps:
                    stop = True
                    break
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                stop = True
            if stop:
                break
        final_phase = phase_for_epoch(min(epoch, cfg.epochs_total - 1), cfg)
        if lifted:
            final_phase.decoupled = False
        final_phase.step = global_step
        checkpoints.append(save("ckpt_final.pt", final_phase))
    return {"log": log_path, "checkpoints": checkpoints, "model": model, "steps": global_step}
