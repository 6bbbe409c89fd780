"""Training objectives for the labeler and the soft downstream mask loss.

Mask losses take logits. Every masked variant reduces over the last two axes
(instance row, superpoint column) and keeps leading batch axes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0      # lambda_1
    bce: float = 5.0      # lambda_2
    dice: float = 2.0     # lambda_3
    tau: float = 0.9

    def __post_init__(self):
        if min(self.cls, self.bce, self.dice) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    def scaled(self, k):
        return LossWeights(self.cls * k, self.bce * k, self.dice * k, self.tau)


def bce_elementwise(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none")


def masked_bce(logits, target, mask):
    """Mean BCE over entries where ``mask`` is set; 0 when none are."""
    m = mask.to(logits.dtype)
    total = (bce_elementwise(logits, target) * m).sum(dim=(-2, -1))
    return total / m.sum(dim=(-2, -1)).clamp_min(1.0)


def masked_dice(logits, target, mask, skip_empty_rows=False):
    """Smooth dice 1 - (2 sum pq + 1) / (sum p + sum q + 1) per row, averaged.

    With ``skip_empty_rows`` rows without any masked entry are left out of the
    average (0 when every row is empty).
    """
    m = mask.to(logits.dtype)
    p = torch.sigmoid(logits) * m
    q = target * m
    dice = 1 - (2 * (p * q).sum(-1) + DICE_SMOOTH) / (p.sum(-1) + q.sum(-1) + DICE_SMOOTH)
    if not skip_empty_rows:
        return dice.mean(-1)
    has = (m.sum(-1) > 0).to(logits.dtype)
    return (dice * has).sum(-1) / has.sum(-1).clamp_min(1.0)


def class_loss(class_logits, categories):
    """Cross-entropy of both queries against their box categories, averaged."""
    flat = class_logits.reshape(-1, class_logits.shape[-1])
    ce = F.cross_entropy(flat, categories.reshape(-1).long(), reduction="none")
    return ce.reshape(categories.shape).mean(-1)


def loss_sim(token_logits, class_logits, targets, token_mask, categories, w: LossWeights):
    """Fully supervised loss on simulated samples over all S1/S2/S3 tokens.

    Shapes: logits/targets (..., 2, L); token_mask (..., L); categories (..., 2).
    Returns (total, components) with per-sample values.
    """
    mask = token_mask[..., None, :].expand_as(token_logits)
    l_cls = class_loss(class_logits, categories)
    l_bce = masked_bce(token_logits, targets, mask)
    l_dice = masked_dice(token_logits, targets, mask)
    total = w.cls * l_cls + w.bce * l_bce + w.dice * l_dice
    return total, {"l_cls": l_cls, "l_bce": l_bce, "l_dice": l_dice}


def region_targets(regions):
    """Binary non-overlap masks: row 0 owns S1 tokens, row 1 owns S2 tokens."""
    from .overlap import S1, S2

    return torch.stack([(regions == S1), (regions == S2)], dim=-2).to(torch.get_default_dtype())


def loss_sup(token_logits, regions, w: LossWeights):
    """BCE + dice against region ownership, over S1 and S2 tokens only."""
    from .overlap import S1, S2

    known = (regions == S1) | (regions == S2)
    mask = known[..., None, :].expand_as(token_logits)
    target = region_targets(regions).to(token_logits.dtype)
    return w.bce * masked_bce(token_logits, target, mask) + w.dice * masked_dice(token_logits, target, mask)


def loss_unsup(student_logits, teacher_logits, s3_mask, w: LossWeights):
    """Confidence-gated consistency on S3 tokens.

    Entries where sigmoid(teacher) > tau supervise the student with the
    teacher's probability as a soft target. Returns (per-sample loss,
    gated count, S3 entry count).
    """
    teacher_p = torch.sigmoid(teacher_logits.detach())
    s3 = s3_mask[..., None, :].expand_as(student_logits)
    gate = (teacher_p > w.tau) & s3
    any_gate = gate.flatten(-2).any(-1).to(student_logits.dtype)
    # gated entries only: student values elsewhere never reach the graph
    safe_logits = torch.where(gate, student_logits, torch.zeros_like(student_logits))
    l_bce = masked_bce(safe_logits, teacher_p, gate)
    l_dice = masked_dice(safe_logits, teacher_p, gate, skip_empty_rows=True)
    loss = (w.bce * l_bce + w.dice * l_dice) * any_gate
    return loss, gate.sum(), s3.sum()


def loss_total_real(l_cls, l_sup, l_unsup, w: LossWeights):
    return w.cls * l_cls + l_sup + l_unsup


def soft_bce(pred_logits, soft_masks):
    """Confidence-weighted BCE: sum(BCE * M) / sum(M) over all K x N entries."""
    pred_logits = torch.as_tensor(pred_logits)
    m = torch.as_tensor(soft_masks, dtype=pred_logits.dtype)
    denom = m.sum()
    if denom <= 0:
        warnings.warn("soft_bce: all soft labels are zero; returning 0", RuntimeWarning, stacklevel=2)
        return pred_logits.sum() * 0.0
    return (bce_elementwise(pred_logits, m) * m).sum() / denom
