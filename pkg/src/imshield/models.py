"""Role networks for image immunization.

Four players share one backbone design: a protecting encoder that hides a
residual in the image, a verifier that flags tampered pixels, a recovery
decoder that repaints flagged content (with masked feature sharing at the two
finest levels), and two patch discriminators that keep the immunized and
recovered images photographic.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbone import UNetBackbone, build_backbone, zero_output_head
from .config import BackboneConfig
from .errors import ContractError, ShapeError


class PatchDiscriminator(nn.Module):
    """Strided-conv patch critic; unbounded scores, one per receptive patch.

    n_layers=3 is the classic 70x70-receptive-field stack; fewer layers keep
    the map nonempty on small progressive-stage inputs.
    """

    def __init__(self, in_channels: int = 3, base_width: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base_width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = base_width
        for i in range(1, n_layers):
            nxt = min(base_width * 2 ** i, 512)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt, affine=True),
                nn.LeakyReLU(0.2),
            ]
            ch = nxt
        nxt = min(base_width * 2 ** n_layers, 512)
        layers += [
            nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ImmunizerModel(nn.Module):
    """Bundle of the five networks plus the wiring conventions between them."""

    def __init__(
        self,
        base_width: int = 32,
        mask_channel: bool = False,
        disc_layers: int = 3,
        disc_s_layers: int | None = None,
        identity_init: bool = True,
    ):
        super().__init__()
        self.mask_channel = mask_channel
        self.encoder = build_backbone(
            BackboneConfig(in_channels=3, out_channels=3, base_width=base_width)
        )
        self.verifier = build_backbone(
            BackboneConfig(
                in_channels=3, out_channels=1, base_width=base_width, final_activation="sigmoid"
            )
        )
        self.decoder = build_backbone(
            BackboneConfig(
                in_channels=4 if mask_channel else 3, out_channels=3, base_width=base_width
            )
        )
        self.disc_c = PatchDiscriminator(3, n_layers=disc_layers)
        self.disc_s = PatchDiscriminator(
            3, n_layers=disc_layers if disc_s_layers is None else disc_s_layers
        )
        if identity_init:
            # start the protection as a no-op so early training compares
            # images that are already close
            zero_output_head(self.encoder)


def _check_image(img: torch.Tensor, name: str) -> None:
    if img.ndim != 4 or img.shape[1] not in (3, 4):
        raise ShapeError(f"{name} must be (B,3,H,W), got {tuple(img.shape)}")
    if img.shape[-1] % 16 or img.shape[-2] % 16:
        raise ShapeError(f"{name} dims must be divisible by 16, got {tuple(img.shape[-2:])}")
    lo, hi = float(img.detach().min()), float(img.detach().max())
    if lo < -1.0 - 1e-5 or hi > 1.0 + 1e-5:
        raise ContractError(f"{name} values must lie in [-1,1], found [{lo:.3f},{hi:.3f}]")


def immunize(model: ImmunizerModel, i: torch.Tensor):
    """Protect a batch: returns the immunized image and the raw residual."""
    _check_image(i, "input image")
    r, _ = model.encoder(i)
    i_m = (i + r).clamp(-1.0, 1.0)
    return i_m, r


def verify(model: ImmunizerModel, i_a: torch.Tensor) -> torch.Tensor:
    """Predict a soft tamper mask in [0,1], shape (B,1,H,W)."""
    _check_image(i_a, "attacked image")
    m, _ = model.verifier(i_a)
    return m


def _decoder_input(model: ImmunizerModel, i_v: torch.Tensor, m_bin: torch.Tensor) -> torch.Tensor:
    if not model.mask_channel:
        return i_v
    m = m_bin.unsqueeze(1) if m_bin.ndim == 3 else m_bin
    return torch.cat([i_v, m.to(i_v.dtype)], dim=1)


def recover(model: ImmunizerModel, i_v: torch.Tensor, m_bin: torch.Tensor) -> torch.Tensor:
    """Repaint masked-out content from a rectified image.

    The binary mask routes decoder features in place of encoder skips at the
    two finest levels, so filled regions draw on surrounding context.
    """
    if m_bin.shape[-2:] != i_v.shape[-2:]:
        raise ShapeError(
            f"mask {tuple(m_bin.shape)} does not match image {tuple(i_v.shape)}"
        )
    i_r, _ = model.decoder(_decoder_input(model, i_v, m_bin), share_mask=m_bin)
    return i_r


def recover_progressive(
    model: ImmunizerModel,
    i_v_low: torch.Tensor,
    m_bin_low: torch.Tensor,
    stage: int,
    fade: float,
) -> torch.Tensor:
    """Stage-limited recovery on a downsampled rectified image."""
    if m_bin_low.shape[-2:] != i_v_low.shape[-2:]:
        raise ShapeError(
            f"mask {tuple(m_bin_low.shape)} does not match image {tuple(i_v_low.shape)}"
        )
    return model.decoder.forward_progressive(
        _decoder_input(model, i_v_low, m_bin_low), stage, fade, share_mask=m_bin_low
    )


def discriminate(disc: PatchDiscriminator, img: torch.Tensor) -> torch.Tensor:
    """Patch-level realism scores; spatial dims shrink with the conv stack."""
    if img.ndim != 4:
        raise ShapeError(f"expected (B,C,H,W), got {tuple(img.shape)}")
    return disc(img)


def build_models(
    base_width: int = 32,
    mask_channel: bool = False,
    disc_layers: int = 3,
    disc_s_layers: int | None = None,
    identity_init: bool = True,
) -> ImmunizerModel:
    return ImmunizerModel(
        base_width=base_width,
        mask_channel=mask_channel,
        disc_layers=disc_layers,
        disc_s_layers=disc_s_layers,
        identity_init=identity_init,
    )
