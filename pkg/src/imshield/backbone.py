"""Shared U-Net backbone.

Four encoding segments double the channel count and halve the spatial size,
a dilated-convolution bottleneck works at 1/16 resolution, and four decoding
segments mirror the way up with skip concatenations. The same network
supports three forward modes: plain, with local feature sharing (skip
features replaced by upsampled decoder features inside a mask), and
progressive (entering at a lower level through per-stage 1x1 input/output
heads with smooth fade-in of the newest level).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig
from .errors import ShapeError
from .masks import downsample_mask


@dataclass
class FeatureTapSet:
    """Per-level feature maps captured during a forward pass."""

    encoder_features: dict[int, torch.Tensor] = field(default_factory=dict)
    decoder_features: dict[int, torch.Tensor] = field(default_factory=dict)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.BatchNorm2d(channels)


def _act(kind: str) -> nn.Module:
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.2, inplace=False)
    return nn.ReLU(inplace=False)


class ConvSegment(nn.Module):
    """Two 3x3 conv + norm + activation blocks at constant output width."""

    def __init__(self, in_ch: int, out_ch: int, cfg: BackboneConfig):
        super().__init__()
        layers = []
        for i in range(2):
            layers += [
                nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1),
                _norm(cfg.normalization, out_ch),
                _act(cfg.activation),
            ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class UpStep(nn.Module):
    """Stride-2 transposed conv + norm + activation, halving channels."""

    def __init__(self, in_ch: int, out_ch: int, cfg: BackboneConfig):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2),
            _norm(cfg.normalization, out_ch),
            _act(cfg.activation),
        )

    def forward(self, x):
        return self.body(x)


class OutputHead(nn.Module):
    """1x1 projection to the output channels plus the range activation."""

    def __init__(self, in_ch: int, out_ch: int, final_activation: str):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)
        self.final_activation = final_activation

    def forward(self, x):
        y = self.proj(x)
        return torch.sigmoid(y) if self.final_activation == "sigmoid" else torch.tanh(y)


class UNetBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        widths = [w * 2 ** k for k in range(cfg.levels)]  # level k -> widths[k-1]

        self.enc = nn.ModuleList(
            ConvSegment(cfg.in_channels if k == 0 else widths[k - 1], widths[k], cfg)
            for k in range(cfg.levels)
        )
        self.pool = nn.MaxPool2d(2) if cfg.pooling == "max" else nn.AvgPool2d(2)

        bneck_ch = w * 2 ** cfg.levels
        layers = []
        ch = widths[-1]
        for rate in cfg.dilation_rates:
            layers += [
                nn.Conv2d(ch, bneck_ch, 3, padding=rate, dilation=rate),
                _norm(cfg.normalization, bneck_ch),
                _act(cfg.activation),
            ]
            ch = bneck_ch
        self.bottleneck = nn.Sequential(*layers)

        self.up = nn.ModuleList(
            UpStep(widths[k] * 2, widths[k], cfg) for k in range(cfg.levels)
        )
        self.dec = nn.ModuleList(
            ConvSegment(widths[k] * 2, widths[k], cfg) for k in range(cfg.levels)
        )
        self.head = OutputHead(widths[0], cfg.out_channels, cfg.final_activation)

        # progressive-mode adapters: stage s enters at level 5-s; entry levels
        # above 1 need a 1x1 image-to-feature stem and their own output head
        self.from_image = nn.ModuleDict(
            {
                str(k): nn.Sequential(
                    nn.Conv2d(cfg.in_channels, widths[k - 2], 1), _act(cfg.activation)
                )
                for k in range(2, cfg.levels + 1)
            }
        )
        self.to_image = nn.ModuleDict(
            {
                str(k): OutputHead(widths[k - 1], cfg.out_channels, cfg.final_activation)
                for k in range(2, cfg.levels + 1)
            }
        )

    def _run(self, x: torch.Tensor, entry: int, share_mask: torch.Tensor | None):
        """Encoder levels entry..4, bottleneck, decoder back to entry."""
        taps = FeatureTapSet()
        h = x
        for k in range(entry, self.cfg.levels + 1):
            e = self.enc[k - 1](h)
            taps.encoder_features[k] = e
            h = self.pool(e)
        h = self.bottleneck(h)
        for k in range(self.cfg.levels, entry - 1, -1):
            u = self.up[k - 1](h)
            skip = taps.encoder_features[k]
            if share_mask is not None and k <= 2:
                # share_mask is at the resolution of this pass's input, so the
                # factor down to level k is relative to the entry level
                m = downsample_mask(share_mask, k - entry + 1)
                if m.ndim == 3:
                    m = m.unsqueeze(1)
                skip = u * m + skip * (1.0 - m)
            h = self.dec[k - 1](torch.cat([skip, u], dim=1))
            taps.decoder_features[k] = h
        return h, taps

    def forward(self, x: torch.Tensor, share_mask: torch.Tensor | None = None):
        """Full-resolution pass; returns (output, per-level feature taps).

        share_mask, when given, swaps the level-1/2 skip features for the
        upsampled decoder features inside the masked region, so content for
        those pixels comes from deeper context rather than the input.
        """
        if x.ndim != 4:
            raise ShapeError(f"expected (B,C,H,W), got {tuple(x.shape)}")
        div = 2 ** self.cfg.levels
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ShapeError(f"spatial dims must be divisible by {div}, got {tuple(x.shape[-2:])}")
        h, taps = self._run(x, 1, share_mask)
        return self.head(h), taps

    def forward_progressive(
        self,
        x_low: torch.Tensor,
        stage: int,
        fade: float,
        share_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Partial-depth pass for progressive training.

        Stage s uses only the deepest s levels; the input is the image
        downsampled by 2^(4-s). The freshest level's output is blended in
        image space with the nearest-upsampled previous-stage output:
        fade=0 reproduces the previous stage exactly, fade=1 is the new
        pathway alone. Stage 1 has no previous pathway and ignores fade.
        """
        if not 1 <= stage <= self.cfg.levels:
            raise ShapeError(f"stage must be in 1..{self.cfg.levels}, got {stage}")
        if x_low.ndim != 4:
            raise ShapeError(f"expected (B,C,H,W), got {tuple(x_low.shape)}")
        div = 2 ** stage
        if x_low.shape[-1] % div or x_low.shape[-2] % div:
            raise ShapeError(
                f"stage {stage} input dims must be divisible by {div}, got {tuple(x_low.shape[-2:])}"
            )
        entry = self.cfg.levels + 1 - stage
        if stage == 1:
            fade = 1.0
        h = self.from_image[str(entry)](x_low) if entry > 1 else x_low
        h, _ = self._run(h, entry, share_mask)
        out = self.head(h) if entry == 1 else self.to_image[str(entry)](h)
        if fade >= 1.0:
            return out
        prev_mask = None
        if share_mask is not None:
            prev_mask = downsample_mask(share_mask, 2)
        prev = self.forward_progressive(
            F.avg_pool2d(x_low, 2), stage - 1, 1.0, share_mask=prev_mask
        )
        old = F.interpolate(prev, scale_factor=2, mode="nearest")
        return fade * out + (1.0 - fade) * old


def build_backbone(cfg: BackboneConfig) -> UNetBackbone:
    return UNetBackbone(cfg)


def zero_output_head(net: UNetBackbone) -> None:
    """Zero the final 1x1 projection so the network's output starts at the
    activation's fixed point (tanh(0) = 0): useful for residual heads that
    should begin as the identity."""
    nn.init.zeros_(net.head.proj.weight)
    nn.init.zeros_(net.head.proj.bias)
    for mod in net.to_image.values():
        nn.init.zeros_(mod.proj.weight)
        nn.init.zeros_(mod.proj.bias)
