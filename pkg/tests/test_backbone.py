"""U-Net backbone: shape arithmetic, parameter accounting, determinism,
gradient checks, and the progressive/fade identities."""

import numpy as np
import pytest
import torch

from imshield.backbone import UNetBackbone, build_backbone, zero_output_head
from imshield.config import BackboneConfig
from imshield.errors import ConfigurationError, ShapeError


def small_net(seed=0, **kw) -> UNetBackbone:
    torch.manual_seed(seed)
    return build_backbone(BackboneConfig(base_width=kw.pop("base_width", 8), **kw))


def conv_params(cin, cout, k):
    return k * k * cin * cout + cout


def segment_params(cin, cout):
    # two 3x3 convs with bias plus two affine instance norms
    return conv_params(cin, cout, 3) + conv_params(cout, cout, 3) + 4 * cout


def hand_count(base, in_ch=3, out_ch=3, rates=(2, 4, 8)):
    widths = [base * 2**k for k in range(4)]
    total = 0
    for k in range(4):
        total += segment_params(in_ch if k == 0 else widths[k - 1], widths[k])
    bneck = base * 16
    ch = widths[3]
    for _ in rates:
        total += conv_params(ch, bneck, 3) + 2 * bneck
        ch = bneck
    for k in range(4):
        total += 2 * 2 * (widths[k] * 2) * widths[k] + widths[k] + 2 * widths[k]
        total += segment_params(widths[k] * 2, widths[k])
    total += conv_params(widths[0], out_ch, 1)
    for k in (2, 3, 4):
        total += conv_params(in_ch, widths[k - 2], 1)
        total += conv_params(widths[k - 1], out_ch, 1)
    return total


class TestConstruction:
    def test_invalid_configs(self):
        with pytest.raises(ConfigurationError):
            build_backbone(BackboneConfig(levels=3))
        with pytest.raises(ConfigurationError):
            build_backbone(BackboneConfig(base_width=0))
        with pytest.raises(ConfigurationError):
            build_backbone(BackboneConfig(normalization="layer"))

    def test_parameter_count_matches_hand_formula(self):
        net = small_net()
        got = sum(p.numel() for p in net.parameters())
        assert got == hand_count(8)
        assert got == 635_956  # frozen for base_width=8, 3->3

    def test_segment_growth_factor(self):
        net = small_net()
        widths = [8 * 2**k for k in range(4)]
        for k in range(1, 4):
            got = sum(p.numel() for p in net.enc[k].parameters())
            assert got == segment_params(widths[k - 1], widths[k])

    def test_sigmoid_variant(self):
        net = small_net(final_activation="sigmoid", out_channels=1)
        with torch.no_grad():
            out, _ = net(torch.rand(1, 3, 32, 32) * 2 - 1)
        assert out.shape == (1, 1, 32, 32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


class TestForward:
    def test_shapes_and_taps(self):
        net = small_net()
        out, taps = net(torch.rand(2, 3, 64, 64) * 2 - 1)
        assert out.shape == (2, 3, 64, 64)
        for k, size in ((1, 64), (2, 32), (3, 16), (4, 8)):
            assert taps.encoder_features[k].shape[-2:] == (size, size)
            assert taps.encoder_features[k].shape[1] == 8 * 2 ** (k - 1)
            assert taps.decoder_features[k].shape[-2:] == (size, size)

    def test_bottleneck_spatial_size(self):
        # captured via the level-4 tap: bottleneck works at input/16
        net = small_net()
        feats = {}
        handle = net.bottleneck.register_forward_hook(
            lambda mod, args, out: feats.update(b=out)
        )
        net(torch.rand(1, 3, 64, 64) * 2 - 1)
        handle.remove()
        assert feats["b"].shape[-2:] == (4, 4)
        assert feats["b"].shape[1] == 8 * 16

    def test_output_range(self):
        net = small_net(seed=3)
        with torch.no_grad():
            out, _ = net(torch.rand(1, 3, 32, 32) * 2 - 1)
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_deterministic(self):
        net = small_net(seed=5)
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        a, _ = net(x)
        b, _ = net(x)
        assert torch.equal(a, b)

    def test_indivisible_dims_rejected(self):
        net = small_net()
        with pytest.raises(ShapeError):
            net(torch.rand(1, 3, 40, 40))
        with pytest.raises(ShapeError):
            net(torch.rand(3, 32, 32))

    def test_zero_head_zero_output(self):
        net = small_net(seed=7)
        zero_output_head(net)
        out, _ = net(torch.rand(1, 3, 32, 32) * 2 - 1)
        assert (out == 0.0).all()
        low = net.forward_progressive(torch.rand(1, 3, 8, 8) * 2 - 1, 2, 1.0)
        assert (low == 0.0).all()


class TestProgressive:
    def test_stage_shapes(self):
        net = small_net()
        for stage in (1, 2, 3, 4):
            size = 64 // 2 ** (4 - stage)
            out = net.forward_progressive(torch.rand(1, 3, size, size) * 2 - 1, stage, 0.5)
            assert out.shape == (1, 3, size, size)

    def test_stage4_fade1_equals_forward(self):
        net = small_net(seed=11)
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        full, _ = net(x)
        prog = net.forward_progressive(x, 4, 1.0)
        assert torch.equal(full, prog)

    def test_stage2_fade0_equals_upsampled_stage1(self):
        net = small_net(seed=13)
        x = torch.rand(1, 3, 16, 16) * 2 - 1
        prev = net.forward_progressive(torch.nn.functional.avg_pool2d(x, 2), 1, 1.0)
        up = torch.nn.functional.interpolate(prev, scale_factor=2, mode="nearest")
        out = net.forward_progressive(x, 2, 0.0)
        assert torch.equal(out, up)

    def test_fade_blend_is_linear(self):
        net = small_net(seed=17)
        x = torch.rand(1, 3, 16, 16) * 2 - 1
        o0 = net.forward_progressive(x, 2, 0.0)
        o1 = net.forward_progressive(x, 2, 1.0)
        o5 = net.forward_progressive(x, 2, 0.5)
        assert torch.allclose(o5, 0.5 * o0 + 0.5 * o1, atol=1e-7)

    def test_stage1_ignores_fade(self):
        net = small_net(seed=19)
        x = torch.rand(1, 3, 8, 8) * 2 - 1
        a = net.forward_progressive(x, 1, 0.0)
        b = net.forward_progressive(x, 1, 1.0)
        assert torch.equal(a, b)

    def test_wrong_size_rejected(self):
        net = small_net()
        with pytest.raises(ShapeError):
            net.forward_progressive(torch.rand(1, 3, 10, 10), 2, 0.5)

    def test_range(self):
        net = small_net(seed=23)
        for stage, fade in ((2, 0.3), (3, 0.8)):
            size = 64 // 2 ** (4 - stage)
            with torch.no_grad():
                out = net.forward_progressive(torch.rand(1, 3, size, size) * 2 - 1, stage, fade)
            assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0


class TestGradients:
    def _fd_check(self, fn, x0, rng, coords=50, eps=1e-6, rel=1e-3):
        x = x0.clone().requires_grad_(True)
        out = fn(x)
        weight = torch.from_numpy(rng.uniform(-1, 1, tuple(out.shape)))
        (out * weight).sum().backward()
        grad = x.grad.clone()
        for _ in range(coords):
            idx = tuple(int(rng.integers(0, s)) for s in x0.shape)
            xp, xm = x0.clone(), x0.clone()
            xp[idx] += eps
            xm[idx] -= eps
            with torch.no_grad():
                fd = float(((fn(xp) - fn(xm)) * weight).sum()) / (2 * eps)
            g = float(grad[idx])
            assert fd == pytest.approx(g, rel=rel, abs=1e-7), f"coord {idx}"

    def test_fd_plain_forward(self):
        net = small_net(seed=29).double()
        rng = np.random.default_rng(0)
        x0 = torch.from_numpy(rng.uniform(-0.9, 0.9, (1, 3, 32, 32)))
        self._fd_check(lambda x: net(x)[0], x0, rng)

    def test_fd_with_share_mask(self):
        net = small_net(seed=31).double()
        rng = np.random.default_rng(1)
        m = torch.from_numpy((rng.uniform(0, 1, (1, 32, 32)) > 0.5).astype(np.float64))
        x0 = torch.from_numpy(rng.uniform(-0.9, 0.9, (1, 3, 32, 32)))
        self._fd_check(lambda x: net(x, share_mask=m)[0], x0, rng)

    def test_fd_progressive(self):
        net = small_net(seed=37).double()
        rng = np.random.default_rng(2)
        x0 = torch.from_numpy(rng.uniform(-0.9, 0.9, (1, 3, 8, 8)))
        self._fd_check(lambda x: net.forward_progressive(x, 2, 0.7), x0, rng)
