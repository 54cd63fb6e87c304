"""PSNR, local PSNR, SSIM, and BCE against per-pixel loops and a reference
library implementation."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from imshield.errors import ContractError, ShapeError
from imshield.metrics import bce, local_psnr, luminance, psnr, ssim, to_unit


def psnr_loop(a, b, peak=1.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    total, n = 0.0, 0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
        n += 1
    mse = total / n
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def local_psnr_loop(a, b, mask, peak=1.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    c = 1 if a.ndim == 2 else a.shape[0]
    total, mass = 0.0, 0.0
    for i in range(a.shape[-2]):
        for j in range(a.shape[-1]):
            if m[i, j] == 0.0:
                continue
            mass += 1.0
            if a.ndim == 2:
                total += (a[i, j] - b[i, j]) ** 2
            else:
                for ch in range(c):
                    total += (a[ch, i, j] - b[ch, i, j]) ** 2
    if mass == 0:
        return math.nan
    mse = total / (mass * c)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


class TestPsnr:
    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = rng.uniform(0, 1, (3, 9, 9))
            b = rng.uniform(0, 1, (3, 9, 9))
            assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)

    def test_frozen_constant_offsets(self):
        a = np.zeros((3, 16, 16))
        # 10*log10(1/0.02^2) and 10*log10(1/0.1^2)
        assert psnr(a, a + 0.02) == pytest.approx(33.979400086720375, abs=1e-9)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_identical_is_inf(self):
        a = np.random.default_rng(1).uniform(0, 1, (3, 8, 8))
        assert psnr(a, a.copy()) == math.inf

    def test_peak_parameter(self):
        a = np.zeros((4, 4))
        assert psnr(a, a + 0.5, peak=2.0) == pytest.approx(
            10 * math.log10(4.0 / 0.25), abs=1e-9
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))

    def test_torch_accepted(self):
        a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        assert psnr(a, b) == pytest.approx(psnr(a.numpy(), b.numpy()), abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, (2, 6, 6)), rng.uniform(0, 1, (2, 6, 6))
        assert psnr(a, b) == pytest.approx(psnr(b, a), rel=1e-12)


class TestLocalPsnr:
    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = rng.uniform(0, 1, (3, 9, 9))
            b = rng.uniform(0, 1, (3, 9, 9))
            m = (rng.uniform(0, 1, (9, 9)) > 0.5).astype(np.float64)
            assert local_psnr(a, b, m) == pytest.approx(local_psnr_loop(a, b, m), abs=1e-9)

    def test_full_mask_equals_global(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (3, 8, 8)), rng.uniform(0, 1, (3, 8, 8))
        m = np.ones((8, 8))
        assert local_psnr(a, b, m) == pytest.approx(psnr(a, b), abs=1e-12)

    def test_empty_mask_nan(self):
        a = np.random.default_rng(4).uniform(0, 1, (3, 8, 8))
        assert math.isnan(local_psnr(a, a + 0.1, np.zeros((8, 8))))

    def test_error_outside_mask_ignored(self):
        a = np.zeros((3, 8, 8))
        b = a.copy()
        b[:, :4, :] += 100.0  # huge error in the unmasked half
        b[:, 4:, :] += 0.1
        m = np.zeros((8, 8))
        m[4:, :] = 1.0
        assert local_psnr(a, b, m) == pytest.approx(20.0, abs=1e-9)

    def test_2d_images(self):
        rng = np.random.default_rng(5)
        a, b = rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8))
        m = (rng.uniform(0, 1, (8, 8)) > 0.3).astype(np.float64)
        assert local_psnr(a, b, m) == pytest.approx(local_psnr_loop(a, b, m), abs=1e-9)


class TestSsim:
    def _skimage(self, a, b):
        return structural_similarity(
            luminance(a),
            luminance(b),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )

    def test_identity_is_one(self):
        a = np.random.default_rng(6).uniform(0, 1, (3, 32, 32))
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_reference_library_agreement(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            base = rng.uniform(0.2, 0.8, (3, 48, 48))
            noisy = np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1)
            # skimage averages over all pixels (padded filtering); restrict to
            # valid windows by comparing its full=True map's interior
            _, smap = structural_similarity(
                luminance(base),
                luminance(noisy),
                gaussian_weights=True,
                sigma=1.5,
                use_sample_covariance=False,
                data_range=1.0,
                full=True,
            )
            r = 11 // 2
            want = smap[r:-r, r:-r].mean()
            assert ssim(base, noisy) == pytest.approx(want, abs=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(ContractError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_luminance_weights(self):
        img = np.zeros((3, 4, 4))
        img[0] = 1.0
        assert luminance(img) == pytest.approx(np.full((4, 4), 0.299), abs=1e-12)

    def test_degraded_scores_lower(self):
        rng = np.random.default_rng(8)
        base = rng.uniform(0.2, 0.8, (3, 32, 32))
        mild = np.clip(base + rng.normal(0, 0.02, base.shape), 0, 1)
        harsh = np.clip(base + rng.normal(0, 0.2, base.shape), 0, 1)
        assert ssim(base, harsh) < ssim(base, mild) <= 1.0


class TestBce:
    def test_half_is_ln2(self):
        p = np.full((16, 16), 0.5)
        t = (np.random.default_rng(9).uniform(0, 1, (16, 16)) > 0.5).astype(np.float64)
        assert bce(p, t) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_near_zero(self):
        t = (np.random.default_rng(10).uniform(0, 1, (16, 16)) > 0.5).astype(np.float64)
        assert bce(t, t) <= 1e-6

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0.01, 0.99, (4, 4))
        t = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(np.float64)
        total = 0.0
        for i in range(4):
            for j in range(4):
                total += -(t[i, j] * math.log(p[i, j]) + (1 - t[i, j]) * math.log(1 - p[i, j]))
        assert bce(p, t) == pytest.approx(total / 16, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce(np.zeros((4, 4)), np.zeros((5, 5)))


class TestToUnit:
    def test_range_mapping(self):
        t = torch.tensor([-1.0, 0.0, 1.0])
        assert np.allclose(to_unit(t), [0.0, 0.5, 1.0])

    def test_dtype_float64(self):
        assert to_unit(torch.rand(2, 2)).dtype == np.float64
