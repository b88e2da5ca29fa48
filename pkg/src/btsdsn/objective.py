"""Class-balanced cross-entropy for side outputs and the fused map.

Losses are per-pixel sums. A truth map without vessel pixels has a zero
negative-class coefficient, so it contributes exactly zero loss and zero
gradient. Training on empty patches therefore teaches nothing.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import ModelGraph, Params, SideOutputs, forward

log = logging.getLogger(__name__)

EPS = 1e-12
# clamping p to [EPS, 1 - EPS] bounds each log term to this interval
_LOG_HI = -math.log(EPS)
_LOG_LO = -math.log1p(-EPS)

EMPTY_TRUTH_CAVEAT = (
    "truth has no vessel pixels in the loss region: class-balanced loss and its "
    "gradient are exactly zero for this sample"
)


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    side_losses: list[torch.Tensor]
    fuse_loss: torch.Tensor
    total: torch.Tensor
    pos_weight: float
    neg_weight: float

    def floats(self) -> dict:
        return {
            "side_losses": [float(s) for s in self.side_losses],
            "fuse_loss": float(self.fuse_loss),
            "total": float(self.total),
        }


def _region(truth: torch.Tensor, region) -> torch.Tensor:
    if region is None:
        return torch.ones_like(truth, dtype=torch.bool)
    region = torch.as_tensor(np.asarray(region) if not torch.is_tensor(region) else region).bool()
    if region.shape != truth.shape:
        raise LossError(f"region shape {tuple(region.shape)} != truth shape {tuple(truth.shape)}")
    if not region.any():
        raise LossError("loss region is empty")
    return region


def _truth(truth) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(truth) if not torch.is_tensor(truth) else truth)
    return t.bool()


def balance_weights(truth, region=None) -> tuple[float, float]:
    """``(|Y-| / |Y|, |Y+| / |Y|)`` counted over ``region`` (default: whole map)."""
    t = _truth(truth)
    r = _region(t, region)
    n = int(r.sum())
    n_pos = int((t & r).sum())
    return (n - n_pos) / n, n_pos / n


def side_loss(prob, truth, region=None) -> torch.Tensor:
    """Balanced cross-entropy on a probability map, p clamped to [1e-12, 1 - 1e-12]."""
    p = prob if torch.is_tensor(prob) else torch.as_tensor(np.asarray(prob, dtype=np.float64))
    t = _truth(truth)
    if p.shape != t.shape:
        raise LossError(f"prediction shape {tuple(p.shape)} != truth shape {tuple(t.shape)}")
    r = _region(t, region)
    pos_w, neg_w = balance_weights(t, r)
    p = p.clamp(EPS, 1.0 - EPS)
    pos = -torch.log(p)[t & r].sum()
    neg = -torch.log1p(-p)[~t & r].sum()
    return pos_w * pos + neg_w * neg


def side_loss_from_logits(logit: torch.Tensor, truth, region=None) -> torch.Tensor:
    """Same value as ``side_loss(sigmoid(logit))`` with the clamp applied in log space.

    ``-log(sigmoid(z)) = softplus(-z)`` avoids rounding sigmoid outputs to 0 or 1.
    """
    t = _truth(truth)
    if logit.shape != t.shape:
        raise LossError(f"prediction shape {tuple(logit.shape)} != truth shape {tuple(t.shape)}")
    r = _region(t, region)
    pos_w, neg_w = balance_weights(t, r)
    pos = F.softplus(-logit).clamp(_LOG_LO, _LOG_HI)[t & r].sum()
    neg = F.softplus(logit).clamp(_LOG_LO, _LOG_HI)[~t & r].sum()
    return pos_w * pos + neg_w * neg


def total_loss(outputs: SideOutputs, truth, alpha: Sequence[float], region=None) -> LossBreakdown:
    """``sum_m alpha_m * side_loss_m + fuse_loss``."""
    M = len(outputs.side_logits)
    if len(alpha) != M:
        raise LossError(f"alpha has {len(alpha)} entries for {M} side outputs")
    t = _truth(truth)
    r = _region(t, region)
    pos_w, neg_w = balance_weights(t, r)
    if neg_w == 0.0:
        log.debug(EMPTY_TRUTH_CAVEAT)
    sides = [side_loss_from_logits(z, t, r) for z in outputs.side_logits]
    fuse = side_loss_from_logits(outputs.fuse_logit, t, r)
    total = fuse + sum(a * s for a, s in zip(alpha, sides))
    return LossBreakdown(side_losses=sides, fuse_loss=fuse, total=total, pos_weight=pos_w, neg_weight=neg_w)


def gradients(graph: ModelGraph, params: Params, image, truth, alpha: Sequence[float] | None = None,
              region=None) -> tuple[dict[str, torch.Tensor], LossBreakdown]:
    """Reverse-mode gradient of the total loss w.r.t. every learnable entry (fusion weights included)."""
    alpha = params.alpha if alpha is None else alpha
    work = Params(
        tensors={k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()},
        fixed=params.fixed, alpha=params.alpha, graph_hash=params.graph_hash, seed=params.seed,
    )
    out = forward(graph, work, image)
    breakdown = total_loss(out, truth, alpha, region)
    names = list(work.tensors)
    grads = torch.autograd.grad(breakdown.total, [work.tensors[n] for n in names], allow_unused=True)
    result = {
        n: (g if g is not None else torch.zeros_like(work.tensors[n])).detach()
        for n, g in zip(names, grads)
    }
    return result, breakdown
