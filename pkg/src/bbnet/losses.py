"""Boundary-weighted BCE + IoU objective applied to both supervision sites."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7
WINDOW = 31
BOUNDARY_GAIN = 5.0


@dataclass
class LossTerms:
    l_wbce_final: torch.Tensor
    l_wiou_final: torch.Tensor
    l_wbce_ofs: torch.Tensor
    l_wiou_ofs: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def pixel_weights(G: torch.Tensor) -> torch.Tensor:
    """``1 + 5 * |local_mean_31x31(G) - G|``; the window mean ignores padding."""
    local = F.avg_pool2d(G, WINDOW, stride=1, padding=WINDOW // 2, count_include_pad=False)
    return 1.0 + BOUNDARY_GAIN * (local - G).abs()


def _per_image(x):
    return x.flatten(1).sum(1)


def weighted_bce(P, G, w):
    """Weighted BCE; reductions are per image, then averaged over the batch."""
    p = P.clamp(EPS, 1 - EPS)
    bce = -(G * torch.log(p) + (1 - G) * torch.log1p(-p))
    return (_per_image(w * bce) / _per_image(w)).mean()


def weighted_iou(P, G, w):
    inter = _per_image(w * P * G)
    union = _per_image(w * (P + G - P * G))
    return (1 - (inter + 1) / (union + 1)).mean()


def total_loss(out, G, bce_only: bool = False) -> LossTerms:
    """Sum of weighted BCE and IoU on the final and OFS predictions.

    ``out`` is anything with ``P`` and ``P_OFS`` attributes. With ``bce_only``
    both IoU terms are reported as zero and excluded from the total.
    """
    w = pixel_weights(G)
    bce_final = weighted_bce(out.P, G, w)
    bce_ofs = weighted_bce(out.P_OFS, G, w)
    if bce_only:
        zero = bce_final.new_zeros(())
        iou_final = iou_ofs = zero
    else:
        iou_final = weighted_iou(out.P, G, w)
        iou_ofs = weighted_iou(out.P_OFS, G, w)
    total = bce_final + iou_final + bce_ofs + iou_ofs
    return LossTerms(bce_final, iou_final, bce_ofs, iou_ofs, total)
