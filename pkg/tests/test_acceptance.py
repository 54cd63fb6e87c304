"""Release gate: one test per shipped guarantee.

Each test measures the guarantee at its stated tolerance and emits a
"PASS criterion N" / "FAIL criterion N" line (visible with `pytest -s`,
or in the captured output of a failing run). Thresholds live here and
nowhere else; they are the contract this package ships against.

Criterion 9 trains a real (tiny) run and dominates the suite's runtime;
deselect it with `pytest -k "not smoke"` for a fast pass over the rest.
"""

import hashlib
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from imshield.attacks import apply_tamper
from imshield.backbone import build_backbone
from imshield.config import (
    BackboneConfig,
    DatasetConfig,
    EvalGridConfig,
    LossWeights,
    RunConfig,
    TrainConfig,
)
from imshield.data import jpeg_roundtrip, make_synth_batch
from imshield.evalgrid import (
    GRID_CELLS,
    METRIC_ROWS,
    evaluate_grid,
    evaluate_stratified,
    stratified_csv,
)
from imshield.jpeg import diff_jpeg
from imshield.losses import (
    combine,
    loss_adv_discriminator,
    loss_adv_generator,
    loss_cls,
    loss_fidelity,
    loss_recovery,
)
from imshield.masks import (
    binarize_otsu,
    open_mask,
    otsu_threshold,
    rectify,
    refine_mask,
)
from imshield.metrics import bce, local_psnr, luminance, psnr, ssim, to_unit
from imshield.models import build_models, immunize, recover, verify
from imshield.training import (
    build_training,
    phase_for_epoch,
    prepare_attack_batch,
    step_decoupled,
    train,
)

# Criterion 9 fixes the protocol (16 images at 64x64, stage-4-only schedule,
# 500 decoupled + 500 coupled steps) and the thresholds; optimizer strength is
# free, and these settings are the smallest found to clear all three bars.
SMOKE_BASE_WIDTH = 8
SMOKE_BATCH = 16
SMOKE_LR = 1e-3


def check(ok: bool, label: str) -> None:
    print(("PASS " if ok else "FAIL ") + label)
    assert ok, label


# ---------------------------------------------------------------- criterion 1


def test_criterion1_tamper_composition_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    mismatches = 0
    for _ in range(100):
        i = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32))
        src = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32))
        m = torch.from_numpy((rng.uniform(0, 1, (1, 8, 8)) < 0.5).astype(np.float32))
        got = apply_tamper(i, src, m)
        want = i.clone()
        for c in range(3):
            for y in range(8):
                for x in range(8):
                    if m[0, y, x] == 1.0:
                        want[0, c, y, x] = src[0, c, y, x]
        if not torch.equal(got, want):
            mismatches += 1
    dt = time.perf_counter() - t0
    check(
        mismatches == 0 and dt < 1.0,
        f"criterion 1: paste composition vs per-pixel oracle, "
        f"{mismatches}/100 mismatches (need 0), {dt:.3f}s (< 1s)",
    )


# ---------------------------------------------------------------- criterion 2


def test_criterion2_differentiable_jpeg():
    t0 = time.perf_counter()

    # (a) constant images stay spatially constant to 1e-4
    flat_worst = 0.0
    for qf in (10, 50, 80, 100):
        for gray in (-0.5, 0.0, 0.25):
            out = diff_jpeg(torch.full((1, 3, 32, 32), gray), qf)
            for c in range(3):
                chan = out[0, c]
                flat_worst = max(flat_worst, float(chan.max() - chan.min()))

    # (b) forward agreement with a real codec at QF=80 over 20 images
    images = make_synth_batch(seed=5, count=20, size=64)
    scores = []
    for img in images:
        ours = diff_jpeg(img.unsqueeze(0), 80).squeeze(0)
        real = jpeg_roundtrip(img, 80)
        scores.append(psnr(to_unit(real), to_unit(ours)))
    codec_mean = float(np.mean(scores))

    # (c) input gradients vs central finite differences, 100 coordinates,
    # in the smooth polynomial rounding mode (float64)
    rng = np.random.default_rng(42)
    base = torch.from_numpy(rng.uniform(-0.6, 0.6, (1, 3, 16, 16)))

    def f(x):
        return diff_jpeg(x, 75, rounding="poly")

    x = base.clone().requires_grad_(True)
    out = f(x)
    weight = torch.from_numpy(rng.uniform(-1, 1, out.shape))
    (out * weight).sum().backward()
    grad = x.grad.clone()
    eps = 1e-6
    fd_bad = 0
    for _ in range(100):
        c = int(rng.integers(0, 3))
        i = int(rng.integers(0, 16))
        j = int(rng.integers(0, 16))
        xp, xm = base.clone(), base.clone()
        xp[0, c, i, j] += eps
        xm[0, c, i, j] -= eps
        fd = float(((f(xp) - f(xm)) * weight).sum()) / (2 * eps)
        g = float(grad[0, c, i, j])
        if abs(fd - g) > max(1e-3 * abs(g), 1e-6):
            fd_bad += 1

    dt = time.perf_counter() - t0
    check(
        flat_worst <= 1e-4 and codec_mean >= 28.0 and fd_bad == 0 and dt < 60.0,
        f"criterion 2: constant spread {flat_worst:.2e} (<= 1e-4), "
        f"codec-agreement PSNR {codec_mean:.2f} dB (>= 28), "
        f"{fd_bad}/100 gradient coords off (need 0), {dt:.1f}s (< 60s)",
    )


# ---------------------------------------------------------------- criterion 3


def _otsu_oracle(x: np.ndarray):
    """Exhaustive 256-threshold search in exact integer arithmetic."""
    bins = np.clip((x * 256.0).astype(np.int64), 0, 255)
    hist = np.bincount(bins.ravel(), minlength=256)
    n = int(hist.sum())
    total = int((hist * np.arange(256)).sum())
    best_k, best_num, best_den = 0, -1, 1
    c0 = s0 = 0
    for k in range(256):
        c0 += int(hist[k])
        s0 += int(hist[k]) * k
        if c0 == 0 or c0 == n:
            continue
        num = (total * c0 - n * s0) ** 2
        den = c0 * (n - c0)
        if num * best_den > best_num * den:  # strict: ties keep the lowest k
            best_k, best_num, best_den = k, num, den
    return (bins > best_k).astype(np.float32), (best_k + 1) / 256.0


def _square_window_oracle(a: np.ndarray, k: int, lo: int, hi: int, mode: str):
    """Double-loop min/max filter; out-of-bounds counts as background."""
    h, w = a.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            vals = []
            for dy in range(lo, hi + 1):
                for dx in range(lo, hi + 1):
                    yy, xx = y + dy, x + dx
                    inside = 0 <= yy < h and 0 <= xx < w
                    vals.append(bool(a[yy, xx]) if inside else False)
            out[y, x] = all(vals) if mode == "erode" else any(vals)
    return out


def _refine_oracle(m: np.ndarray, k: int = 4) -> np.ndarray:
    a = m > 0.5
    e_lo, e_hi = -(k // 2), k - 1 - k // 2
    d_lo, d_hi = -(k - 1 - k // 2), k // 2
    ero = _square_window_oracle(a, k, e_lo, e_hi, "erode")
    dil1 = _square_window_oracle(ero, k, d_lo, d_hi, "dilate")
    dil2 = _square_window_oracle(dil1, k, d_lo, d_hi, "dilate")
    return dil1.astype(np.float32), dil2.astype(np.float32)


def test_criterion3_otsu_and_morphology_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    otsu_bad = 0
    for _ in range(50):
        # bimodal-ish soft masks: two uniform lobes
        lo = rng.uniform(0.0, 0.4, (24, 24))
        hi = rng.uniform(0.5, 1.0, (24, 24))
        pick = rng.uniform(0, 1, (24, 24)) < rng.uniform(0.2, 0.8)
        soft = np.where(pick, hi, lo).astype(np.float64)
        want_mask, want_thr = _otsu_oracle(soft)
        got_mask = binarize_otsu(soft)
        got_thr = otsu_threshold(soft)
        if not (np.array_equal(got_mask, want_mask) and got_thr == want_thr):
            otsu_bad += 1

    morph_bad = 0
    for _ in range(8):
        m = (rng.uniform(0, 1, (18, 18)) < 0.45).astype(np.float32)
        want_open, want_refine = _refine_oracle(m, k=4)
        if not np.array_equal(open_mask(m, 4), want_open):
            morph_bad += 1
        if not np.array_equal(refine_mask(m, 4), want_refine):
            morph_bad += 1

    dt = time.perf_counter() - t0
    check(
        otsu_bad == 0 and morph_bad == 0 and dt < 30.0,
        f"criterion 3: otsu vs exhaustive search {otsu_bad}/50 off (need 0), "
        f"morphology vs double-loop oracle {morph_bad}/16 off (need 0), "
        f"{dt:.1f}s (< 30s)",
    )


# ---------------------------------------------------------------- criterion 4


def test_criterion4_loss_fixed_points():
    rng = np.random.default_rng(4)
    i = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 16, 16)))
    m_g = torch.from_numpy((rng.uniform(0, 1, (2, 16, 16)) < 0.3).astype(np.float64))

    zeros_exact = (
        float(loss_recovery(i, i.clone(), m_g)) == 0.0
        and float(loss_fidelity(i, i.clone())) == 0.0
        and float(loss_adv_generator(torch.ones(2, 1, 6, 6))) == 0.0
        and float(loss_adv_discriminator(torch.ones(2, 1, 6, 6), torch.zeros(2, 1, 6, 6)))
        == 0.0
    )
    # perfect mask prediction: zero up to the log-clamp epsilon
    cls_perfect = float(loss_cls(m_g.clone(), m_g))

    w = LossWeights()
    weights_ok = (w.alpha, w.beta, w.gamma, w.theta) == (0.01, 0.005, 0.5, 0.5)
    unit_total = float(combine(1.0, 1.0, 1.0, 1.0, 1.0, w, decoupled=False))

    half = torch.full_like(m_g, 0.5)
    bce_half = float(loss_cls(half, m_g))

    check(
        zeros_exact
        and cls_perfect <= 1e-6
        and weights_ok
        and abs(unit_total - 1.5175) <= 1e-9
        and abs(bce_half - math.log(2.0)) <= 1e-6,
        f"criterion 4: zero cases exact={zeros_exact}, perfect-mask bce "
        f"{cls_perfect:.2e} (<= 1e-6), unit-part total {unit_total!r} "
        f"(1.5175 +- 1e-9), bce(0.5) - ln2 = {bce_half - math.log(2.0):.2e} (<= 1e-6)",
    )


# ---------------------------------------------------------------- criterion 5


def _psnr_loop(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total, n = 0.0, 0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
        n += 1
    return 10.0 * math.log10(peak * peak / (total / n))


def _local_psnr_loop(a, b, mask, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total, n = 0.0, 0
    for c in range(a.shape[0]):
        for y in range(a.shape[1]):
            for x in range(a.shape[2]):
                if mask[y, x] == 1.0:
                    total += (a[c, y, x] - b[c, y, x]) ** 2
                    n += 1
    return 10.0 * math.log10(peak * peak / (total / n))


def test_criterion5_metric_oracles():
    rng = np.random.default_rng(55)
    a = rng.uniform(0.2, 0.8, (3, 48, 48))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    mask = (rng.uniform(0, 1, (48, 48)) < 0.4).astype(np.float64)

    d_psnr = abs(psnr(a, b) - _psnr_loop(a, b))
    d_lpsnr = abs(local_psnr(a, b, mask) - _local_psnr_loop(a, b, mask))

    # reference SSIM: same gaussian windowing, averaged over valid windows only
    _, smap = structural_similarity(
        luminance(a),
        luminance(b),
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
        full=True,
    )
    r = 11 // 2
    d_ssim = abs(ssim(a, b) - smap[r:-r, r:-r].mean())

    full = np.ones((48, 48))
    full_equal = local_psnr(a, b, full) == psnr(a, b)

    check(
        d_psnr <= 1e-9 and d_lpsnr <= 1e-9 and d_ssim <= 1e-6 and full_equal,
        f"criterion 5: psnr delta {d_psnr:.2e} (<= 1e-9), masked-psnr delta "
        f"{d_lpsnr:.2e} (<= 1e-9), ssim delta {d_ssim:.2e} (<= 1e-6), "
        f"full-mask equality {full_equal}",
    )


# ---------------------------------------------------------------- criterion 6


def test_criterion6_progressive_schedule():
    torch.manual_seed(6)
    net = build_backbone(BackboneConfig(in_channels=3, out_channels=3, base_width=8))
    net.eval()
    x = torch.rand(1, 3, 64, 64) * 2 - 1

    shapes_ok = True
    with torch.no_grad():
        for stage in (1, 2, 3, 4):
            x_low = x
            for _ in range(4 - stage):
                x_low = F.avg_pool2d(x_low, 2)
            out = net.forward_progressive(x_low, stage, 1.0)
            want = 64 // 2 ** (4 - stage)
            shapes_ok = shapes_ok and out.shape[-2:] == (want, want)

        # fade endpoints at stage 3: fade=0 reproduces the upsampled previous
        # stage bit-exactly; fade=1 is the fresh pathway alone, checked by
        # rebuilding the midpoint blend from the two endpoint outputs
        x3 = F.avg_pool2d(x, 2)
        prev = net.forward_progressive(F.avg_pool2d(x3, 2), 2, 1.0)
        up = F.interpolate(prev, scale_factor=2, mode="nearest")
        endpoint0 = torch.equal(net.forward_progressive(x3, 3, 0.0), up)
        fresh = net.forward_progressive(x3, 3, 1.0)
        mid = net.forward_progressive(x3, 3, 0.5)
        endpoint1 = torch.equal(mid, 0.5 * fresh + (1.0 - 0.5) * up)

    sched = TrainConfig(epochs_total=200, epochs_per_progressive_phase=20, decoupling_lift_epoch=100)
    fixtures = {
        0: (1, 1.0, True),
        20: (2, 0.0, True),
        100: (4, 1.0, False),
    }
    sched_ok = True
    for epoch, (stage, fade, decoupled) in fixtures.items():
        ph = phase_for_epoch(epoch, sched)
        sched_ok = sched_ok and (ph.stage, ph.fade, ph.decoupled) == (stage, fade, decoupled)

    check(
        shapes_ok and endpoint0 and endpoint1 and sched_ok,
        f"criterion 6: stage shapes {shapes_ok}, fade=0 endpoint bit-exact "
        f"{endpoint0}, fade=1 endpoint bit-exact {endpoint1}, "
        f"epoch fixtures {sched_ok}",
    )


# ---------------------------------------------------------------- criterion 7


def _param_sha(*modules) -> str:
    h = hashlib.sha256()
    for mod in modules:
        for p in mod.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def test_criterion7_decoupling_isolation(tmp_path):
    cfg = RunConfig(
        train=TrainConfig(
            epochs_total=4,
            epochs_per_progressive_phase=0,
            decoupling_lift_epoch=2,
            batch_size=4,
            checkpoint_every=0,
            lift_patience=0,
        ),
        dataset=DatasetConfig(image_size=32),
        backbone_base_width=8,
        out_dir=str(tmp_path),
    )
    model, opts = build_training(cfg)
    batch = make_synth_batch(7, 4, 32).clamp(-0.95, 0.95)

    # verifier-only update leaves every generator/discriminator byte untouched
    gen_before = _param_sha(model.encoder, model.decoder)
    disc_before = _param_sha(model.disc_c, model.disc_s)
    ver_before = _param_sha(model.verifier)
    i_m, _ = immunize(model, batch)
    i_a, m_g, _ = prepare_attack_batch(i_m.detach(), cfg, step=0)
    l_ver = loss_cls(verify(model, i_a), m_g.unsqueeze(1))
    opts.verifier.zero_grad(set_to_none=True)
    l_ver.backward()
    opts.verifier.step()
    ver_only_ok = (
        _param_sha(model.encoder, model.decoder) == gen_before
        and _param_sha(model.disc_c, model.disc_s) == disc_before
        and _param_sha(model.verifier) != ver_before
    )

    # generator-only update leaves every verifier byte untouched
    ver_before = _param_sha(model.verifier)
    gen_before = _param_sha(model.encoder, model.decoder)
    i_m, _ = immunize(model, batch)
    i_a, m_g, _ = prepare_attack_batch(i_m, cfg, step=1)
    i_r = recover(model, rectify(i_a, m_g), m_g)
    l_gen = loss_recovery(batch, i_r, m_g) + 0.5 * loss_fidelity(batch, i_m)
    opts.gen.zero_grad(set_to_none=True)
    l_gen.backward()
    opts.gen.step()
    gen_only_ok = (
        _param_sha(model.verifier) == ver_before
        and _param_sha(model.encoder, model.decoder) != gen_before
    )

    # the shipped decoupled step is live on both sides
    hashes_before = (_param_sha(model.verifier), _param_sha(model.encoder, model.decoder))
    phase = phase_for_epoch(0, cfg.train)
    step_decoupled(model, opts, batch, cfg, phase)
    live_ok = hashes_before != (
        _param_sha(model.verifier),
        _param_sha(model.encoder, model.decoder),
    )

    # decoupling forces the classification term out of the generator total
    w = LossWeights()
    forced = float(combine(0.3, 0.2, 123.456, 0.1, 0.05, w, decoupled=True))
    reference = float(combine(0.3, 0.2, 0.0, 0.1, 0.05, w, decoupled=False))
    alpha_ok = forced == reference

    check(
        ver_only_ok and gen_only_ok and live_ok and alpha_ok,
        f"criterion 7: verifier-only isolation {ver_only_ok}, generator-only "
        f"isolation {gen_only_ok}, decoupled step liveness {live_ok}, "
        f"classification term forced out {alpha_ok}",
    )


# ---------------------------------------------------------------- criterion 8


def test_criterion8_feature_sharing_endpoints():
    torch.manual_seed(8)
    model = build_models(base_width=8)
    dec = model.decoder
    dec.eval()
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    zero_m = torch.zeros(1, 32, 32)
    unit_m = torch.ones(1, 32, 32)

    with torch.no_grad():
        plain, _ = dec(x)
        masked_zero, _ = dec(x, share_mask=zero_m)
    zero_ok = torch.equal(plain, masked_zero)

    captured = {}

    def grab(level):
        def hook(_mod, inputs):
            captured[level] = inputs[0].detach().clone()

        return hook

    handles = [dec.dec[k - 1].register_forward_pre_hook(grab(k)) for k in (1, 2, 3, 4)]
    with torch.no_grad():
        dec(x, share_mask=unit_m)
        unit_caps = dict(captured)
        captured.clear()
        dec(x, share_mask=zero_m)
        zero_caps = dict(captured)
    for h in handles:
        h.remove()

    # unit mask: the skip half of the level-1/2 concat equals the upsampled half
    unit_ok = True
    for k in (1, 2):
        cat = unit_caps[k]
        half = cat.shape[1] // 2
        unit_ok = unit_ok and torch.equal(cat[:, :half], cat[:, half:])

    # levels 3 and 4 never see the mask: identical inputs either way
    deep_ok = all(torch.equal(unit_caps[k], zero_caps[k]) for k in (3, 4))
    # ... while the mask demonstrably reroutes the finest level
    shallow_differs = not torch.equal(unit_caps[1], zero_caps[1])

    check(
        zero_ok and unit_ok and deep_ok and shallow_differs,
        f"criterion 8: zero-mask pass bit-equal to plain {zero_ok}, unit-mask "
        f"concat halves identical {unit_ok}, deep levels mask-independent "
        f"{deep_ok}, finest level rerouted {shallow_differs}",
    )


# ---------------------------------------------------------------- criterion 9


def test_criterion9_smoke_training(tmp_path):
    t0 = time.perf_counter()
    steps_per_epoch = -(-16 // SMOKE_BATCH)
    epochs = 1000 // steps_per_epoch
    cfg = RunConfig(
        train=TrainConfig(
            epochs_total=epochs,
            epochs_per_progressive_phase=0,
            decoupling_lift_epoch=epochs // 2,
            batch_size=SMOKE_BATCH,
            learning_rate=SMOKE_LR,
            checkpoint_every=0,
            lift_patience=0,
            seed=0,
        ),
        dataset=DatasetConfig(image_size=64, seed=0),
        backbone_base_width=SMOKE_BASE_WIDTH,
        out_dir=str(tmp_path),
    )
    images = make_synth_batch(cfg.dataset.seed, 16, 64)
    result = train(cfg, images)
    assert result["steps"] == 1000
    model = result["model"]
    model.eval()

    with torch.no_grad():
        i_m, _ = immunize(model, images)
        imm_psnrs = [psnr(to_unit(images[j]), to_unit(i_m[j])) for j in range(16)]
        bces, gains = [], []
        for start in (0, 8):
            b_im = i_m[start : start + 8]
            b_i = images[start : start + 8]
            # fresh tampers from the training distribution, unseen step offset
            i_a, m_g, _ = prepare_attack_batch(b_im, cfg, step=10**6 + start)
            m_soft = verify(model, i_a)
            for j in range(8):
                bces.append(bce(m_soft[j].squeeze(0), m_g[j]))
            i_v = rectify(i_a, m_g)
            i_r = recover(model, i_v, m_g)
            for j in range(8):
                m2 = m_g[j].numpy()
                if m2.sum() == 0:
                    continue
                lp_r = local_psnr(to_unit(b_i[j]), to_unit(i_r[j]), m2)
                lp_v = local_psnr(to_unit(b_i[j]), to_unit(i_v[j]), m2)
                gains.append(lp_r - lp_v)

    bce_mean = float(np.mean(bces))
    psnr_mean = float(np.mean(imm_psnrs))
    gain_mean = float(np.mean(gains))
    dt = time.perf_counter() - t0
    check(
        bce_mean < 0.1 and psnr_mean > 30.0 and gain_mean >= 3.0 and dt <= 3 * 3600,
        f"criterion 9: tamper-mask bce {bce_mean:.4f} (< 0.1), protected-image "
        f"psnr {psnr_mean:.2f} dB (> 30), repaint gain {gain_mean:.2f} dB "
        f"(>= 3), {dt / 60:.1f} min (<= 180)",
    )


# --------------------------------------------------------------- criterion 10


def test_criterion10_evaluation_grid():
    torch.manual_seed(10)
    model = build_models(base_width=8)
    images = make_synth_batch(17, 3, 32)
    gcfg = EvalGridConfig(limit=2, seed=0)

    rep1 = evaluate_grid(model, images, gcfg)
    rep2 = evaluate_grid(model, images, gcfg)
    names = [c[0] for c in GRID_CELLS]
    layout_ok = (
        list(rep1.cells.keys()) == names
        and len(names) == 12
        and all(set(METRIC_ROWS) <= set(rep1.cells[n]) for n in names)
        and len(METRIC_ROWS) == 4
    )
    grid_deterministic = rep1.to_csv() == rep2.to_csv()

    srep1 = evaluate_stratified(model, images, gcfg)
    srep2 = evaluate_stratified(model, images, gcfg)
    band_names = [f"rst{round(b[0] * 100)}_rlt{round(b[1] * 100)}" for b in gcfg.strat_bands]
    strat_ok = list(srep1.cells.keys()) == band_names
    strat_deterministic = stratified_csv(srep1) == stratified_csv(srep2)

    check(
        layout_ok and grid_deterministic and strat_ok and strat_deterministic,
        f"criterion 10: 12x4 grid layout {layout_ok}, grid CSV byte-identical "
        f"{grid_deterministic}, band layout {strat_ok}, band CSV "
        f"byte-identical {strat_deterministic}",
    )
