"""Training objectives: mask classification, reconstruction, adversarial.

All norms are means over elements so the stated weight defaults are
resolution-independent. Every loss is differentiable w.r.t. the generated
inputs; masks enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import LossWeights
from .errors import ShapeError

BCE_EPS = 1e-7


@dataclass
class LossReport:
    l_cls: float = 0.0
    l_r: float = 0.0
    l_c: float = 0.0
    l_dr: float = 0.0
    l_dc: float = 0.0
    l_total: float = 0.0

    def recompute_total(self, weights: LossWeights, decoupled: bool = False) -> float:
        return combine(
            self.l_r, self.l_c, self.l_cls, self.l_dr, self.l_dc, weights, decoupled
        )


def combine(l_r, l_c, l_cls, l_dr, l_dc, weights: LossWeights, decoupled: bool = False):
    """Weighted generator objective; task decoupling forces the mask term to 0."""
    alpha = 0.0 if decoupled else weights.alpha
    return (
        (l_r + weights.gamma * l_c)
        + alpha * l_cls
        + weights.beta * (l_dr + weights.theta * l_dc)
    )


def loss_cls(m: torch.Tensor, m_g: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy of the predicted soft mask against the binary
    ground truth."""
    if m.shape != m_g.shape:
        raise ShapeError(f"mask shapes differ: {m.shape} vs {m_g.shape}")
    p = m.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(m_g * torch.log(p) + (1.0 - m_g) * torch.log(1.0 - p)).mean()


def loss_recovery(i, i_r, m_g):
    """Recovery fidelity: global mean squared error plus a masked-mean term
    that re-weights the tampered pixels. The emphasis vanishes on empty masks."""
    if i.shape != i_r.shape:
        raise ShapeError(f"image shapes differ: {i.shape} vs {i_r.shape}")
    mask = m_g if m_g.ndim == i.ndim else m_g.reshape(m_g.shape[:-2] + (1,) + m_g.shape[-2:])
    if mask.shape[-2:] != i.shape[-2:]:
        raise ShapeError(f"mask {m_g.shape} does not match images {i.shape}")
    sq = (i - i_r) ** 2
    l_r = sq.mean()
    mass = mask.sum()
    if mass > 0:
        channels = i.shape[-3] if i.ndim >= 3 else 1
        l_r = l_r + (mask * sq).sum() / (mass * channels)
    return l_r


def loss_fidelity(i, i_m):
    """Immunization fidelity: mean squared distance to the original."""
    if i.shape != i_m.shape:
        raise ShapeError(f"image shapes differ: {i.shape} vs {i_m.shape}")
    return ((i - i_m) ** 2).mean()


def loss_rec(i, i_m, i_r, m_g):
    """Reconstruction pair: recovery loss with a masked-mean emphasis term, and
    the immunized-fidelity loss."""
    if not (i.shape == i_m.shape == i_r.shape):
        raise ShapeError("image shapes differ")
    l_r = loss_recovery(i, i_r, m_g)
    l_c = loss_fidelity(i, i_m)
    return l_r, l_c


def loss_adv_generator(score_map: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss: the discriminator should score 1."""
    return ((1.0 - score_map) ** 2).mean()


def loss_adv_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator loss on a (real, fake) score pair."""
    return 0.5 * (fake_scores**2).mean() + 0.5 * ((1.0 - real_scores) ** 2).mean()


def loss_total(report: LossReport, weights: LossWeights, decoupled: bool = False) -> float:
    """Recompute the scalar generator objective from a report's parts."""
    return float(
        combine(report.l_r, report.l_c, report.l_cls, report.l_dr, report.l_dc, weights, decoupled)
    )
