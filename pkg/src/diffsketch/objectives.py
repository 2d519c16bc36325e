"""Training objectives: L1/perceptual/embedding reconstruction and the
directional within/across embedding losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossWeights:
    across: float = 1.0
    within: float = 1.0
    l1: float = 30.0
    lpips: float = 15.0
    clipsim: float = 30.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    def is_zero(self) -> bool:
        return all(v == 0 for v in asdict(self).values())


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def directional_loss(a1, a2, b1, b2, eps: float = 1e-8) -> torch.Tensor:
    """1 - cos(a1 - a2, b1 - b2), averaged over any leading batch dimension.

    A difference shorter than ``eps`` carries no direction and contributes 0.
    """
    u = _t(a1) - _t(a2)
    v = _t(b1) - _t(b2)
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    ok = (nu >= eps) & (nv >= eps)
    safe = torch.where(ok, nu * nv, torch.ones_like(nu))
    cos = (u * v).sum(dim=-1) / safe
    return torch.where(ok, 1.0 - cos, torch.zeros_like(cos)).mean()


def loss_within(i_samp, i_source, s_samp, s_gt, embedder) -> torch.Tensor:
    """Image-to-image direction should match sketch-to-sketch direction."""
    return directional_loss(embedder(i_samp), embedder(i_source), embedder(s_samp), embedder(s_gt))


def loss_across(i_samp, i_source, s_samp, s_gt, embedder) -> torch.Tensor:
    """Image-to-sketch direction of the sample should match that of the ground truth."""
    return directional_loss(embedder(s_samp), embedder(i_samp), embedder(s_gt), embedder(i_source))


def embedding_distance(a, b, embedder) -> torch.Tensor:
    ea, eb = embedder(a), embedder(b)
    return (1.0 - (ea * eb).sum(dim=-1)).mean()


def loss_rec(pred, gt, embedder, perceptual, weights: LossWeights = LossWeights(), l1: bool = True):
    """Weighted reconstruction loss and its raw components.

    ``l1=False`` swaps the pixel term for squared error (ablation only).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ in shape")
    diff = pred - gt
    pix = diff.abs().mean() if l1 else (diff * diff).mean()
    perc = perceptual(pred, gt).mean()
    sim = embedding_distance(pred, gt, embedder)
    total = weights.l1 * pix + weights.lpips * perc + weights.clipsim * sim
    return total, {"rec_l1": pix, "rec_perc": perc, "rec_sim": sim}


@dataclass
class LossTerms:
    rec_l1: torch.Tensor
    rec_perc: torch.Tensor
    rec_sim: torch.Tensor
    within: torch.Tensor
    across: torch.Tensor
    rec: torch.Tensor
    total: torch.Tensor

    def record(self, iteration: int) -> dict:
        return {
            "iter": iteration,
            "rec_l1": float(self.rec_l1.detach()),
            "rec_perc": float(self.rec_perc.detach()),
            "rec_sim": float(self.rec_sim.detach()),
            "within": float(self.within.detach()),
            "across": float(self.across.detach()),
            "total": float(self.total.detach()),
        }

    def finite(self) -> bool:
        return all(bool(torch.isfinite(v)) for v in (self.rec_l1, self.rec_perc, self.rec_sim, self.within, self.across, self.total))


def loss_total(
    pred_gt,
    s_gt,
    i_samp,
    i_source,
    s_samp,
    embedder,
    perceptual,
    weights: LossWeights = LossWeights(),
    l1: bool = True,
) -> LossTerms:
    """Reconstruction on the ground-truth pair plus weighted directional terms on the sample.

    ``pred_gt`` is the generator's sketch for the ground-truth features,
    ``s_samp`` its sketch for the sampled image ``i_samp``.
    """
    rec, parts = loss_rec(pred_gt, s_gt, embedder, perceptual, weights, l1=l1)
    within = loss_within(i_samp, i_source, s_samp, s_gt, embedder)
    across = loss_across(i_samp, i_source, s_samp, s_gt, embedder)
    total = rec + weights.across * across + weights.within * within
    return LossTerms(within=within, across=across, rec=rec, total=total, **parts)
